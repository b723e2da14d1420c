//! Joint and staged (search → prune → quantize → timesteps) pipelines over
//! the same budget, for apples-to-apples comparison.

use std::time::Instant;

use rand::Rng;

use super::{evaluate, retrain_trainer, run_retrain, run_search, ArchTrain, IterMetrics, Trainer};
use crate::arch::{decode_architecture, Architecture, Decoded, Network, TimestepMode, OFF_LOGIT};
use crate::config::RunConfig;
use crate::data::Dataset;
use crate::error::{Result, SnasError};
use crate::objectives::FULL_PRECISION_BITS;
use crate::scalar::Scalar;

/// Relative accuracy drop tolerated when stage T shortens the simulation.
pub const STAGE_T_TOLERANCE: f64 = 0.005;

#[derive(Clone, Debug, PartialEq)]
pub struct StageRecord {
    pub stage: &'static str,
    pub seconds: f64,
    /// Training-set accuracy after the stage, when measured.
    pub accuracy: Option<f64>,
}

/// Final network of a pipeline with its test accuracy and design cost.
#[derive(Clone, Debug)]
pub struct PipelineResult<T> {
    pub name: String,
    pub arch: Architecture,
    pub net: Network<T>,
    pub test_accuracy: f64,
    pub design_seconds: f64,
    pub stages: Vec<StageRecord>,
    pub search_metrics: Vec<IterMetrics>,
    pub retrain_metrics: Vec<IterMetrics>,
}

fn tagged<V>(stage: &'static str, r: Result<V>) -> Result<V> {
    r.map_err(|e| SnasError::Stage {
        stage,
        source: Box::new(e),
    })
}

/// Smallest `t` whose accuracy is within [`STAGE_T_TOLERANCE`] of the best.
pub fn pick_timesteps(accuracy: &[f64]) -> Option<usize> {
    let best = accuracy.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    accuracy
        .iter()
        .position(|&a| a >= best - STAGE_T_TOLERANCE * best)
        .map(|i| i + 1)
}

/// Search, decode, and retrain with every objective active at once.
pub fn joint_pipeline<T: Scalar, R: Rng>(
    cfg: &RunConfig,
    train: &Dataset<T>,
    test: &Dataset<T>,
    rng: &mut R,
) -> Result<PipelineResult<T>> {
    let start = Instant::now();
    let mut stages = Vec::new();

    let t0 = Instant::now();
    let searched = tagged("search", super::search(cfg, train, rng))?;
    let decoded = tagged("search", decode_architecture(&searched.trainer.net))?;
    stages.push(StageRecord {
        stage: "search",
        seconds: t0.elapsed().as_secs_f64(),
        accuracy: None,
    });

    let t0 = Instant::now();
    let retrained = tagged(
        "retrain",
        super::retrain(
            cfg,
            &decoded,
            Some(&searched.trainer.net.params),
            train,
            rng,
        ),
    )?;
    let acc = tagged(
        "retrain",
        evaluate(&retrained.trainer.net, train, cfg.train.encoding, None),
    )?;
    stages.push(StageRecord {
        stage: "retrain",
        seconds: t0.elapsed().as_secs_f64(),
        accuracy: Some(acc),
    });
    let design_seconds = start.elapsed().as_secs_f64();

    let net = retrained.trainer.net;
    let test_accuracy = tagged("evaluate", evaluate(&net, test, cfg.train.encoding, None))?;
    Ok(PipelineResult {
        name: "joint".into(),
        arch: decoded.arch,
        net,
        test_accuracy,
        design_seconds,
        stages,
        search_metrics: searched.metrics,
        retrain_metrics: retrained.metrics,
    })
}

/// Stage A: topology search at full precision, no pruning, no resource
/// terms, ψ frozen at `t_max`. Stage P: retrain with pruning. Stage Q: masks
/// frozen, bit-widths searched alone, then retrained. Stage T: the shortest
/// simulation within tolerance of the best training accuracy.
pub fn sequential_pipeline<T: Scalar, R: Rng>(
    cfg: &RunConfig,
    train: &Dataset<T>,
    test: &Dataset<T>,
    rng: &mut R,
) -> Result<PipelineResult<T>> {
    cfg.validate()?;
    let start = Instant::now();
    let profile = cfg.backbone()?;
    let mut stages = Vec::new();
    let enc = cfg.train.encoding;
    let half = |n: usize| n.div_ceil(2).max(1);

    // A
    let t0 = Instant::now();
    let mut cfg_a = cfg.clone();
    cfg_a.space.bits = vec![FULL_PRECISION_BITS];
    cfg_a.space.pruning_rate = 0.0;
    cfg_a.loss.lambda1 = 0.0;
    cfg_a.loss.lambda2 = 0.0;
    let (search_metrics, stage_a) = tagged(
        "A",
        (|| {
            let mut net = Network::supernet(&profile, &cfg_a.space, rng)?;
            if let TimestepMode::Searched(id) = net.timesteps {
                let psi = net.params.value_mut(id).data_mut();
                let last = psi.len() - 1;
                for (i, v) in psi.iter_mut().enumerate() {
                    *v = if i == last {
                        T::zero()
                    } else {
                        T::lit(OFF_LOGIT)
                    };
                }
            }
            let filter = ArchTrain::Suffixes(vec![
                "alpha".into(),
                "alpha.normal".into(),
                "alpha.reduce".into(),
            ]);
            let trainer = Trainer::new(net, cfg_a.optim, cfg_a.loss_config(), 0.0, filter);
            run_search(trainer, train, &cfg_a, cfg.train.epochs, rng).and_then(|run| {
                let d = decode_architecture(&run.trainer.net)?;
                Ok((run.metrics, (d, run.trainer.net.params)))
            })
        })(),
    )?;
    let (decoded_a, params_a) = stage_a;
    stages.push(StageRecord {
        stage: "A",
        seconds: t0.elapsed().as_secs_f64(),
        accuracy: None,
    });

    // P
    let t0 = Instant::now();
    let mut cfg_p = cfg_a.clone();
    cfg_p.space.pruning_rate = cfg.space.pruning_rate;
    let pruned = tagged(
        "P",
        retrain_trainer(&cfg_p, &decoded_a, Some(&params_a), false, rng)
            .and_then(|t| run_retrain(t, train, &cfg_p, half(cfg.train.retrain_epochs), rng)),
    )?;
    let acc_p = tagged("P", evaluate(&pruned.trainer.net, train, enc, None))?;
    stages.push(StageRecord {
        stage: "P",
        seconds: t0.elapsed().as_secs_f64(),
        accuracy: Some(acc_p),
    });

    // Q
    let t0 = Instant::now();
    let masks = tagged("Q", pruned.trainer.net.current_masks())?;
    let (decoded_q, retrained) = tagged(
        "Q",
        (|| {
            let mut net = Network::bit_search(&profile, &cfg.space, &decoded_a.arch, rng)?;
            net.params.copy_matching(&pruned.trainer.net.params);
            net.frozen_masks = masks.clone();
            net.stem.running_mean = pruned.trainer.net.stem.running_mean.clone();
            net.stem.running_var = pruned.trainer.net.stem.running_var.clone();
            let trainer = Trainer::new(
                net,
                cfg.optim,
                cfg.loss_config(),
                0.0,
                ArchTrain::Suffixes(vec![".beta".into()]),
            );
            let run = run_search(trainer, train, cfg, half(cfg.train.epochs), rng)?;
            let arch = decode_architecture(&run.trainer.net)?.arch;
            let decoded = Decoded { arch, masks };
            let mut cfg_q = cfg.clone();
            cfg_q.train.inherit_weights = true;
            let t = retrain_trainer(&cfg_q, &decoded, Some(&run.trainer.net.params), true, rng)?;
            let retrained = run_retrain(t, train, &cfg_q, half(cfg.train.retrain_epochs), rng)?;
            Ok((decoded, retrained))
        })(),
    )?;
    let acc_q = tagged("Q", evaluate(&retrained.trainer.net, train, enc, None))?;
    stages.push(StageRecord {
        stage: "Q",
        seconds: t0.elapsed().as_secs_f64(),
        accuracy: Some(acc_q),
    });

    // T
    let t0 = Instant::now();
    let mut net = retrained.trainer.net;
    let accs = tagged(
        "T",
        (1..=cfg.space.t_max)
            .map(|t| evaluate(&net, train, enc, Some(t)))
            .collect::<Result<Vec<f64>>>(),
    )?;
    let t_best = pick_timesteps(&accs).ok_or_else(|| SnasError::Stage {
        stage: "T",
        source: Box::new(SnasError::invalid("no accuracy measured")),
    })?;
    net.timesteps = TimestepMode::Fixed(t_best);
    let mut arch = decoded_q.arch;
    arch.timesteps = t_best;
    stages.push(StageRecord {
        stage: "T",
        seconds: t0.elapsed().as_secs_f64(),
        accuracy: Some(accs[t_best - 1]),
    });
    let design_seconds = start.elapsed().as_secs_f64();

    let test_accuracy = tagged("evaluate", evaluate(&net, test, enc, None))?;
    Ok(PipelineResult {
        name: "sequential".into(),
        arch,
        net,
        test_accuracy,
        design_seconds,
        stages,
        search_metrics,
        retrain_metrics: retrained.metrics,
    })
}

/// One point of a λ sweep.
#[derive(Clone, Debug)]
pub struct SweepPoint<T> {
    pub lambda1: f64,
    pub lambda2: f64,
    pub result: PipelineResult<T>,
}

/// Runs the joint pipeline once per `(λ1, λ2)` pair, each from a generator
/// seeded with `seed` so only the coefficients differ between points.
pub fn sweep<T: Scalar>(
    cfg: &RunConfig,
    grid: &[(f64, f64)],
    train: &Dataset<T>,
    test: &Dataset<T>,
    seed: u64,
) -> Result<Vec<SweepPoint<T>>> {
    use rand::SeedableRng;
    grid.iter()
        .map(|&(lambda1, lambda2)| {
            let mut c = cfg.clone();
            c.loss.lambda1 = lambda1;
            c.loss.lambda2 = lambda2;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let result = joint_pipeline(&c, train, test, &mut rng)?;
            Ok(SweepPoint {
                lambda1,
                lambda2,
                result,
            })
        })
        .collect()
}
