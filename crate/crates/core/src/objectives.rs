//! Resource-aware objectives: ψ-weighted spike rate, SynOps, effective
//! bit-width, memory and bit-SynOps losses, and the timestep-weighted
//! cross-entropy.
//!
//! Every quantity has a plain-number form (reporting, tests) and a graph
//! form that is differentiable in the architecture logits α, β and ψ.
//! Spike rates always enter as constants.

use crate::autograd::{softmax_slice, Graph, Var};
use crate::error::{Result, SnasError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Bit-width charged to layers that are never quantized.
pub const FULL_PRECISION_BITS: u32 = 32;

/// Logits over candidate timestep counts `1..=t_max`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimestepGate<T> {
    pub logits: Tensor<T>,
}

impl<T: Scalar> TimestepGate<T> {
    pub fn uniform(t_max: usize) -> Self {
        TimestepGate {
            logits: Tensor::zeros(&[t_max]),
        }
    }

    /// Gate concentrated on `t` timesteps (exact one-hot after softmax).
    pub fn one_hot(t_max: usize, t: usize) -> Self {
        let mut logits = Tensor::full(&[t_max], T::lit(-1e4));
        logits.data_mut()[t - 1] = T::zero();
        TimestepGate { logits }
    }

    pub fn t_max(&self) -> usize {
        self.logits.len()
    }

    pub fn weights(&self) -> Vec<T> {
        softmax_slice(self.logits.data())
    }

    /// Timestep count with the largest logit; ties go to the smaller count.
    pub fn decode(&self) -> usize {
        argmax(self.logits.data()) + 1
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax<T: PartialOrd + Copy>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Memory coefficient, per bit.
    pub lambda1: f64,
    /// Compute coefficient, per bit-SynOp.
    pub lambda2: f64,
    /// Pruning rate in percent.
    pub pruning_rate: f64,
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda1 < 0.0
            || self.lambda2 < 0.0
            || !self.lambda1.is_finite()
            || !self.lambda2.is_finite()
        {
            return Err(SnasError::invalid(
                "λ1 and λ2 must be finite and non-negative",
            ));
        }
        crate::compression::keep_count(1, self.pruning_rate)?;
        Ok(())
    }
}

/// Geometry and measured input activity of one synaptic layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerCostDescriptor {
    pub name: String,
    pub kh: usize,
    pub kw: usize,
    pub c_in: usize,
    pub c_out: usize,
    /// Output feature-map height and width.
    pub h: usize,
    pub w: usize,
    pub pruning_rate: f64,
    /// Average rate of spikes arriving on this layer's synapses, per timestep.
    pub rates: Vec<f64>,
}

impl LayerCostDescriptor {
    pub fn params(&self) -> usize {
        self.kh * self.kw * self.c_in * self.c_out
    }

    pub fn keep_fraction(&self) -> f64 {
        1.0 - self.pruning_rate / 100.0
    }

    /// `(1 - p%) k_h k_w C_in C_out H W`, the SynOps per unit of spike rate.
    pub fn synops_per_rate(&self) -> f64 {
        self.keep_fraction() * (self.params() * self.h * self.w) as f64
    }

    /// `(1 - p%) k_h k_w C_in C_out`, the parameter count after pruning.
    pub fn kept_params(&self) -> f64 {
        self.keep_fraction() * self.params() as f64
    }
}

/// `S = Σ_t softmax(ψ)_t Σ_{t'≤t} s^(t')`.
pub fn weighted_spike_rate<T: Scalar>(rates: &[T], psi: &[T]) -> Result<T> {
    weighted_spike_rate_probs(rates, &softmax_slice(psi))
}

/// [`weighted_spike_rate`] with relative weights already normalised.
pub fn weighted_spike_rate_probs<T: Scalar>(rates: &[T], weights: &[T]) -> Result<T> {
    if rates.len() != weights.len() {
        return Err(SnasError::invalid(format!(
            "{} spike rates for {} timestep weights",
            rates.len(),
            weights.len()
        )));
    }
    let mut prefix = T::zero();
    let mut s = T::zero();
    for (&r, &w) in rates.iter().zip(weights) {
        prefix += r;
        s += w * prefix;
    }
    Ok(s)
}

pub fn synops(layer: &LayerCostDescriptor, spike_rate: f64) -> f64 {
    layer.synops_per_rate() * spike_rate
}

/// `b_w = Σ_j softmax(β)_j B_j`.
pub fn effective_bitwidth<T: Scalar>(beta: &[T], bits: &[u32]) -> Result<T> {
    if beta.len() != bits.len() || bits.is_empty() {
        return Err(SnasError::invalid(format!(
            "{} logits for {} bit-width candidates",
            beta.len(),
            bits.len()
        )));
    }
    Ok(softmax_slice(beta)
        .into_iter()
        .zip(bits)
        .fold(T::zero(), |acc, (p, &b)| acc + p * T::from_u32(b).unwrap()))
}

/// One layer's contribution to the resource losses.
#[derive(Clone, Debug, PartialEq)]
pub struct CostTerm {
    pub layer: LayerCostDescriptor,
    pub bitwidth: f64,
    /// Operation weight softmax(α) of the owning edge (1 outside mixed edges).
    pub op_weight: f64,
}

/// Model size in bits: `Σ b_w k_h k_w C_in C_out (1 - p%)`, op-weighted.
pub fn loss_mem(terms: &[CostTerm]) -> f64 {
    terms
        .iter()
        .map(|t| t.op_weight * t.bitwidth * t.layer.kept_params())
        .sum()
}

/// bit-SynOps: `Σ b_w SynOps`, op-weighted, with each layer's SynOps taken
/// at its own ψ-weighted spike rate.
pub fn loss_comp(terms: &[CostTerm], psi_weights: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    for t in terms {
        let s = weighted_spike_rate_probs(&t.layer.rates, psi_weights)?;
        total += t.op_weight * t.bitwidth * synops(&t.layer, s);
    }
    Ok(total)
}

/// Plain SynOps of a set of layers at the given timestep weights.
pub fn total_synops(terms: &[CostTerm], psi_weights: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    for t in terms {
        let s = weighted_spike_rate_probs(&t.layer.rates, psi_weights)?;
        total += t.op_weight * synops(&t.layer, s);
    }
    Ok(total)
}

fn cross_entropy_row<T: Scalar>(logits: &[T], label: usize) -> T {
    -softmax_slice(logits)[label].ln()
}

/// `Σ_t softmax(ψ)_t CE((1/t) Σ_{t'≤t} O(t'), y)` for a batch.
///
/// `outputs[t]` holds `[batch, classes]` logits row-major.
pub fn weighted_ce<T: Scalar>(outputs: &[Vec<T>], labels: &[usize], psi: &[T]) -> Result<T> {
    if outputs.len() != psi.len() {
        return Err(SnasError::invalid(format!(
            "{} output steps for {} timestep logits",
            outputs.len(),
            psi.len()
        )));
    }
    let weights = softmax_slice(psi);
    let batch = labels.len();
    let classes = outputs.first().map_or(0, |o| o.len() / batch.max(1));
    let mut running = vec![T::zero(); batch * classes];
    let mut total = T::zero();
    for (t, (out, &w)) in outputs.iter().zip(&weights).enumerate() {
        running.iter_mut().zip(out).for_each(|(r, &o)| *r += o);
        let inv = T::one() / T::from_count(t + 1);
        let mut ce = T::zero();
        for (b, &y) in labels.iter().enumerate() {
            let avg: Vec<T> = running[b * classes..(b + 1) * classes]
                .iter()
                .map(|&v| v * inv)
                .collect();
            ce += cross_entropy_row(&avg, y);
        }
        total += w * ce / T::from_count(batch);
    }
    Ok(total)
}

pub fn total_loss(ce: f64, mem: f64, comp: f64, cfg: &LossConfig) -> f64 {
    ce + cfg.lambda1 * mem + cfg.lambda2 * comp
}

// ---- graph forms ----

/// Bit-width of a layer inside the graph.
#[derive(Clone, Debug, PartialEq)]
pub enum BitSource {
    Fixed(u32),
    Mixed { beta: Var, bits: Vec<u32> },
}

/// A [`CostTerm`] whose bit-width and op weight may be graph values.
#[derive(Clone, Debug, PartialEq)]
pub struct CostTermVar {
    pub layer: LayerCostDescriptor,
    pub bits: BitSource,
    pub op_weight: Option<Var>,
}

pub fn effective_bitwidth_var<T: Scalar>(g: &mut Graph<T>, beta: Var, bits: &[u32]) -> Result<Var> {
    if g.value(beta).len() != bits.len() || bits.is_empty() {
        return Err(SnasError::invalid(
            "β and bit-width candidates differ in length",
        ));
    }
    let probs = g.softmax(beta)?;
    let b = g.constant(Tensor::from_vec(
        bits.iter().map(|&k| T::from_u32(k).unwrap()).collect(),
    ));
    let prod = g.mul(probs, b)?;
    Ok(g.sum(prod))
}

/// ψ-weighted spike rate given `softmax(ψ)` as a graph vector.
pub fn weighted_spike_rate_var<T: Scalar>(
    g: &mut Graph<T>,
    rates: &[f64],
    psi_probs: Var,
) -> Result<Var> {
    if g.value(psi_probs).len() != rates.len() {
        return Err(SnasError::invalid(
            "spike rates and timestep weights differ in length",
        ));
    }
    let mut prefix = 0.0;
    let sums: Vec<T> = rates
        .iter()
        .map(|&r| {
            prefix += r;
            T::lit(prefix)
        })
        .collect();
    let c = g.constant(Tensor::from_vec(sums));
    let prod = g.mul(psi_probs, c)?;
    Ok(g.sum(prod))
}

/// Resource losses `(Loss_MEM, Loss_COMP)` as graph scalars.
pub fn resource_losses_var<T: Scalar>(
    g: &mut Graph<T>,
    terms: &[CostTermVar],
    psi_probs: Var,
) -> Result<(Var, Var)> {
    let mut mem_terms = Vec::with_capacity(terms.len());
    let mut comp_terms = Vec::with_capacity(terms.len());
    for t in terms {
        let bw = match &t.bits {
            BitSource::Fixed(k) => g.constant(Tensor::scalar(T::from_u32(*k).unwrap())),
            BitSource::Mixed { beta, bits } => effective_bitwidth_var(g, *beta, bits)?,
        };
        let weighted = match t.op_weight {
            Some(w) => g.mul(bw, w)?,
            None => bw,
        };
        mem_terms.push(g.scale(weighted, T::lit(t.layer.kept_params())));
        let s = weighted_spike_rate_var(g, &t.layer.rates, psi_probs)?;
        let bs = g.mul(weighted, s)?;
        comp_terms.push(g.scale(bs, T::lit(t.layer.synops_per_rate())));
    }
    if mem_terms.is_empty() {
        let z = g.constant(Tensor::scalar(T::zero()));
        return Ok((z, z));
    }
    Ok((g.add_n(&mem_terms)?, g.add_n(&comp_terms)?))
}

/// Timestep-weighted cross-entropy. `outputs[t]` is `[batch, classes]`.
pub fn weighted_ce_var<T: Scalar>(
    g: &mut Graph<T>,
    outputs: &[Var],
    labels: &[usize],
    psi_probs: Var,
) -> Result<Var> {
    if outputs.len() != g.value(psi_probs).len() {
        return Err(SnasError::invalid(
            "output steps and timestep weights differ in length",
        ));
    }
    let mut running: Option<Var> = None;
    let mut terms = Vec::with_capacity(outputs.len());
    for (t, &o) in outputs.iter().enumerate() {
        let sum = match running {
            None => o,
            Some(r) => g.add(r, o)?,
        };
        running = Some(sum);
        let avg = g.scale(sum, T::one() / T::from_count(t + 1));
        let ce = g.cross_entropy(avg, labels)?;
        let w = g.select(psi_probs, t)?;
        terms.push(g.mul(ce, w)?);
    }
    g.add_n(&terms)
}

/// `ce + λ1 mem + λ2 comp` inside the graph.
pub fn total_loss_var<T: Scalar>(
    g: &mut Graph<T>,
    ce: Var,
    mem: Var,
    comp: Var,
    cfg: &LossConfig,
) -> Result<Var> {
    let m = g.scale(mem, T::lit(cfg.lambda1));
    let c = g.scale(comp, T::lit(cfg.lambda2));
    let s = g.add(ce, m)?;
    g.add(s, c)
}

#[cfg(test)]
mod tests;
