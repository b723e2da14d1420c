//! Two-step joint optimisation, retraining of decoded networks, evaluation,
//! and the sequential search → prune → quantize → timestep baseline.

mod sequential;

pub use sequential::{
    joint_pipeline, pick_timesteps, sequential_pipeline, sweep, PipelineResult, StageRecord,
    SweepPoint, STAGE_T_TOLERANCE,
};

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::arch::{decode_architecture, Decoded, ForwardOptions, ForwardPass, Network, ParamStore};
use crate::autograd::{Graph, Var};
use crate::config::{ArchSplit, RunConfig};
use crate::data::{Batch, Dataset, Encoding};
use crate::error::{Result, SnasError};
use crate::objectives::{
    argmax, effective_bitwidth, resource_losses_var, total_loss_var, weighted_ce_var,
    weighted_spike_rate_probs, LossConfig,
};
use crate::optim::{cosine_lr, OptimConfig, OptimState};
use crate::scalar::Scalar;

/// Which arch-group tensors the adaptive step may move.
#[derive(Clone, Debug, PartialEq)]
pub enum ArchTrain {
    All,
    Nothing,
    /// Parameters whose name ends with one of these suffixes.
    Suffixes(Vec<String>),
}

impl ArchTrain {
    pub fn accepts(&self, name: &str) -> bool {
        match self {
            ArchTrain::All => true,
            ArchTrain::Nothing => false,
            ArchTrain::Suffixes(s) => s.iter().any(|x| name.ends_with(x.as_str())),
        }
    }
}

/// Loss components of one pass, as plain numbers.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepMetrics {
    pub loss: f64,
    pub ce: f64,
    pub mem_bits: f64,
    pub bit_synops: f64,
    /// Mean ψ-weighted spike rate over synaptic layers.
    pub spike_rate: f64,
    /// Mean effective bit-width over cells.
    pub bw_mean: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterMetrics {
    pub iter: u64,
    pub step: StepMetrics,
}

pub const METRICS_CSV_HEADER: &str = "iter,loss,ce,mem_bits,bit_synops,S,b_w_mean";

impl IterMetrics {
    pub fn csv_row(&self) -> String {
        let s = &self.step;
        format!(
            "{},{:e},{:e},{:e},{:e},{:e},{:e}",
            self.iter, s.loss, s.ce, s.mem_bits, s.bit_synops, s.spike_rate, s.bw_mean
        )
    }
}

pub fn metrics_csv(rows: &[IterMetrics], config_hash: &str) -> String {
    let mut out = format!("# config {config_hash}\n{METRICS_CSV_HEADER}");
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

struct LossVars {
    loss: Var,
    ce: Var,
    mem: Var,
    comp: Var,
}

fn batch_vars<T: Scalar>(g: &mut Graph<T>, batch: &Batch<T>) -> Vec<Var> {
    batch.steps.iter().map(|x| g.constant(x.clone())).collect()
}

/// Forward pass plus the three-term loss (and `aux_weight` times the
/// auxiliary cross-entropy when the network has an auxiliary head).
fn loss_pass<T: Scalar>(
    g: &mut Graph<T>,
    net: &Network<T>,
    bound: &crate::arch::Bound,
    batch: &Batch<T>,
    cfg: &LossConfig,
    aux_weight: f64,
) -> Result<(ForwardPass<T>, LossVars)> {
    if batch.is_empty() {
        return Err(SnasError::invalid("empty batch"));
    }
    let xs = batch_vars(g, batch);
    let pass = net.forward(
        g,
        bound,
        &xs,
        ForwardOptions {
            train: true,
            record: false,
        },
    )?;
    let mut ce = weighted_ce_var(g, &pass.logits, &batch.labels, pass.psi_probs)?;
    if !pass.aux_logits.is_empty() && aux_weight > 0.0 {
        let aux = weighted_ce_var(g, &pass.aux_logits, &batch.labels, pass.psi_probs)?;
        let aux = g.scale(aux, T::lit(aux_weight));
        ce = g.add(ce, aux)?;
    }
    let (mem, comp) = resource_losses_var(g, &pass.cost_terms, pass.psi_probs)?;
    let loss = total_loss_var(g, ce, mem, comp, cfg)?;
    Ok((
        pass,
        LossVars {
            loss,
            ce,
            mem,
            comp,
        },
    ))
}

fn step_metrics<T: Scalar>(
    g: &Graph<T>,
    net: &Network<T>,
    pass: &ForwardPass<T>,
    v: &LossVars,
) -> StepMetrics {
    let psi: Vec<f64> = g.data(pass.psi_probs).iter().map(|x| x.as_f64()).collect();
    let rates: Vec<f64> = pass
        .cost_terms
        .iter()
        .filter(|t| t.layer.rates.iter().any(|&r| r > 0.0))
        .filter_map(|t| weighted_spike_rate_probs(&t.layer.rates, &psi).ok())
        .collect();
    let spike_rate = if rates.is_empty() {
        0.0
    } else {
        rates.iter().sum::<f64>() / rates.len() as f64
    };
    let bws: Vec<f64> = net
        .cells
        .iter()
        .map(|c| match c.bits {
            crate::arch::CellBits::Fixed(k) => f64::from(k),
            crate::arch::CellBits::Searched(id) => {
                effective_bitwidth(net.params.value(id).data(), &net.space.bits)
                    .map(|b| b.as_f64())
                    .unwrap_or(f64::NAN)
            }
        })
        .collect();
    StepMetrics {
        loss: g.item(v.loss).as_f64(),
        ce: g.item(v.ce).as_f64(),
        mem_bits: g.item(v.mem).as_f64(),
        bit_synops: g.item(v.comp).as_f64(),
        spike_rate,
        bw_mean: bws.iter().sum::<f64>() / bws.len().max(1) as f64,
    }
}

/// A network with its optimizer state and the loss it is trained on.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub net: Network<T>,
    pub state: OptimState<T>,
    pub optim: OptimConfig,
    pub loss: LossConfig,
    pub aux_weight: f64,
    pub arch_train: ArchTrain,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(
        net: Network<T>,
        optim: OptimConfig,
        loss: LossConfig,
        aux_weight: f64,
        arch_train: ArchTrain,
    ) -> Self {
        Trainer {
            net,
            state: OptimState::new(),
            optim,
            loss,
            aux_weight,
            arch_train,
        }
    }

    fn guard(&self, stage: &str, m: &StepMetrics) -> Result<()> {
        if m.loss.is_finite() {
            Ok(())
        } else {
            Err(SnasError::Diverged {
                stage: stage.to_string(),
                iteration: self.state.iteration as usize,
                detail: format!("{m:?}"),
            })
        }
    }

    /// Step 1: loss on `weight_batch`, momentum update of the weights group
    /// only. Step 2: fresh pass on `arch_batch` with the updated weights,
    /// adaptive update of the accepted arch-group tensors only.
    pub fn joint_step(
        &mut self,
        weight_batch: &Batch<T>,
        arch_batch: &Batch<T>,
        lr: f64,
    ) -> Result<(StepMetrics, Option<StepMetrics>)> {
        if weight_batch.is_empty() || arch_batch.is_empty() {
            return Err(SnasError::invalid("joint step needs two non-empty batches"));
        }
        let first = self.weight_step(weight_batch, lr, false)?;
        let second = if self.arch_train == ArchTrain::Nothing {
            None
        } else {
            let mut g = Graph::new();
            let bound = self.net.params.bind(&mut g);
            let (pass, vars) = loss_pass(
                &mut g,
                &self.net,
                &bound,
                arch_batch,
                &self.loss,
                self.aux_weight,
            )?;
            let m = step_metrics(&g, &self.net, &pass, &vars);
            self.guard("arch", &m)?;
            g.backward(vars.loss)?;
            let grads = self.net.params.grads(&g, &bound);
            let filter = self.arch_train.clone();
            self.state
                .step_arch(&mut self.net.params, &grads, &self.optim, &|n| {
                    filter.accepts(n)
                });
            Some(m)
        };
        self.state.iteration += 1;
        Ok((first, second))
    }

    /// One pass on `batch` updating the weights group; with `with_arch` the
    /// same gradients also drive the accepted arch-group tensors.
    pub fn weight_step(
        &mut self,
        batch: &Batch<T>,
        lr: f64,
        with_arch: bool,
    ) -> Result<StepMetrics> {
        let mut g = Graph::new();
        let bound = self.net.params.bind(&mut g);
        let (pass, vars) = loss_pass(
            &mut g,
            &self.net,
            &bound,
            batch,
            &self.loss,
            self.aux_weight,
        )?;
        let m = step_metrics(&g, &self.net, &pass, &vars);
        self.guard("weights", &m)?;
        g.backward(vars.loss)?;
        let grads = self.net.params.grads(&g, &bound);
        self.state
            .step_weights(&mut self.net.params, &grads, lr, self.optim.momentum);
        if with_arch && self.arch_train != ArchTrain::Nothing {
            let filter = self.arch_train.clone();
            self.state
                .step_arch(&mut self.net.params, &grads, &self.optim, &|n| {
                    filter.accepts(n)
                });
        }
        if let Some((mean, var)) = &pass.bn_batch {
            self.net.update_running_stats(mean, var);
        }
        Ok(m)
    }

    /// Loss components on `batch` without updating anything.
    pub fn measure(&self, batch: &Batch<T>) -> Result<StepMetrics> {
        let mut g = Graph::new();
        let bound = self.net.params.bind(&mut g);
        let (pass, vars) = loss_pass(
            &mut g,
            &self.net,
            &bound,
            batch,
            &self.loss,
            self.aux_weight,
        )?;
        Ok(step_metrics(&g, &self.net, &pass, &vars))
    }
}

/// Index batches for one epoch: `⌊n / size⌋` batches (one short batch when
/// `n < size`).
fn epoch_batches<R: Rng>(idx: &mut [usize], size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    idx.shuffle(rng);
    if idx.len() < size {
        return vec![idx.to_vec()];
    }
    idx.chunks_exact(size).map(<[usize]>::to_vec).collect()
}

/// Outcome of a search or retraining loop.
#[derive(Clone, Debug)]
pub struct TrainRun<T> {
    pub trainer: Trainer<T>,
    pub metrics: Vec<IterMetrics>,
    pub seconds: f64,
}

/// Runs `epochs` of joint steps. Weight batches come from one half of
/// `data`, arch batches from the other (or the same batch, per config).
pub fn run_search<T: Scalar, R: Rng>(
    mut trainer: Trainer<T>,
    data: &Dataset<T>,
    cfg: &RunConfig,
    epochs: usize,
    rng: &mut R,
) -> Result<TrainRun<T>> {
    let start = Instant::now();
    if data.len() < 2 {
        return Err(SnasError::Dataset(
            "search needs at least two training samples".into(),
        ));
    }
    let steps = trainer.net.steps();
    let enc = cfg.train.encoding;
    let mut all: Vec<usize> = (0..data.len()).collect();
    all.shuffle(rng);
    let (mut w_idx, mut a_idx) = match cfg.train.arch_split {
        ArchSplit::HeldOut => {
            let half = data.len() / 2;
            (all[..half].to_vec(), all[half..].to_vec())
        }
        ArchSplit::Same => (all.clone(), all),
    };
    let mut metrics = Vec::new();
    for _ in 0..epochs {
        let wb = epoch_batches(&mut w_idx, cfg.train.batch_size, rng);
        let ab = match cfg.train.arch_split {
            ArchSplit::HeldOut => epoch_batches(&mut a_idx, cfg.train.batch_size, rng),
            ArchSplit::Same => wb.clone(),
        };
        for (i, w) in wb.iter().enumerate() {
            let a = &ab[i % ab.len()];
            let wbatch = data.batch(w, steps, enc)?;
            let abatch = data.batch(a, steps, enc)?;
            let (m, _) = trainer.joint_step(&wbatch, &abatch, cfg.optim.weight_lr)?;
            metrics.push(IterMetrics {
                iter: trainer.state.iteration,
                step: m,
            });
        }
        trainer.state.epoch += 1;
    }
    Ok(TrainRun {
        trainer,
        metrics,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Builds the supernet for `cfg` and runs the joint search on `train`.
pub fn search<T: Scalar, R: Rng>(
    cfg: &RunConfig,
    train: &Dataset<T>,
    rng: &mut R,
) -> Result<TrainRun<T>> {
    cfg.validate()?;
    let net = Network::supernet(&cfg.backbone()?, &cfg.space, rng)?;
    let trainer = Trainer::new(net, cfg.optim, cfg.loss_config(), 0.0, ArchTrain::All);
    run_search(trainer, train, cfg, cfg.train.epochs, rng)
}

/// Trains `trainer` on all of `data` for `epochs` with a cosine-decayed
/// weight learning rate; arch tensors accepted by its filter (pruning
/// scores) follow the same gradients.
pub fn run_retrain<T: Scalar, R: Rng>(
    mut trainer: Trainer<T>,
    data: &Dataset<T>,
    cfg: &RunConfig,
    epochs: usize,
    rng: &mut R,
) -> Result<TrainRun<T>> {
    let start = Instant::now();
    if data.is_empty() {
        return Err(SnasError::Dataset(
            "retraining needs training samples".into(),
        ));
    }
    let steps = trainer.net.steps();
    let mut idx: Vec<usize> = (0..data.len()).collect();
    let per_epoch = (data.len() / cfg.train.batch_size).max(1) as u64;
    let total = per_epoch * epochs as u64;
    let mut metrics = Vec::new();
    let mut k = 0u64;
    for _ in 0..epochs {
        for b in epoch_batches(&mut idx, cfg.train.batch_size, rng) {
            let batch = data.batch(&b, steps, cfg.train.encoding)?;
            let lr = cosine_lr(cfg.optim.weight_lr, k, total);
            let m = trainer.weight_step(&batch, lr, true)?;
            trainer.state.iteration += 1;
            k += 1;
            metrics.push(IterMetrics {
                iter: trainer.state.iteration,
                step: m,
            });
        }
        trainer.state.epoch += 1;
    }
    Ok(TrainRun {
        trainer,
        metrics,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Single-branch network for `decoded`, ready for retraining: auxiliary
/// head at the configured cell, weights inherited by name from `source`
/// when configured, masks frozen when `freeze_masks`.
pub fn retrain_trainer<T: Scalar, R: Rng>(
    cfg: &RunConfig,
    decoded: &Decoded,
    source: Option<&ParamStore<T>>,
    freeze_masks: bool,
    rng: &mut R,
) -> Result<Trainer<T>> {
    cfg.validate()?;
    let mut net = Network::decoded(
        &cfg.backbone()?,
        &cfg.space,
        &decoded.arch,
        cfg.aux_cell()?,
        rng,
    )?;
    if let (true, Some(src)) = (cfg.train.inherit_weights, source) {
        net.params.copy_matching(src);
    }
    let arch_train = if freeze_masks {
        net.frozen_masks = decoded.masks.clone();
        ArchTrain::Nothing
    } else if cfg.space.pruning_rate > 0.0 {
        ArchTrain::Suffixes(vec![".scores".into()])
    } else {
        ArchTrain::Nothing
    };
    let loss = LossConfig {
        lambda1: 0.0,
        lambda2: 0.0,
        pruning_rate: cfg.space.pruning_rate,
    };
    Ok(Trainer::new(
        net,
        cfg.optim,
        loss,
        cfg.train.aux_weight,
        arch_train,
    ))
}

/// Retrains a decoded architecture on `train`.
pub fn retrain<T: Scalar, R: Rng>(
    cfg: &RunConfig,
    decoded: &Decoded,
    source: Option<&ParamStore<T>>,
    train: &Dataset<T>,
    rng: &mut R,
) -> Result<TrainRun<T>> {
    let trainer = retrain_trainer(cfg, decoded, source, false, rng)?;
    run_retrain(trainer, train, cfg, cfg.train.retrain_epochs, rng)
}

/// Top-1 accuracy with evaluation-mode batch norm; the prediction is the
/// argmax of the logits averaged over `steps` timesteps (network default
/// when `None`).
pub fn evaluate<T: Scalar>(
    net: &Network<T>,
    data: &Dataset<T>,
    enc: Encoding,
    steps: Option<usize>,
) -> Result<f64> {
    if data.is_empty() {
        return Err(SnasError::Dataset(
            "cannot evaluate on an empty dataset".into(),
        ));
    }
    let steps = steps.unwrap_or_else(|| net.steps());
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0usize;
    for chunk in idx.chunks(100) {
        let batch = data.batch(chunk, steps, enc)?;
        let mut g = Graph::new();
        let bound = net.params.bind(&mut g);
        let xs = batch_vars(&mut g, &batch);
        let pass = net.forward(&mut g, &bound, &xs, ForwardOptions::default())?;
        let classes = net.profile.classes;
        let mut sums = vec![0.0; batch.len() * classes];
        for &l in &pass.logits {
            for (s, v) in sums.iter_mut().zip(g.data(l)) {
                *s += v.as_f64();
            }
        }
        for (row, &label) in sums.chunks(classes).zip(&batch.labels) {
            if argmax(row) == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Decodes the searched supernet.
pub fn decode<T: Scalar>(run: &TrainRun<T>) -> Result<Decoded> {
    decode_architecture(&run.trainer.net)
}

#[cfg(test)]
mod tests;
