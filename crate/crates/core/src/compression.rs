//! Weight compression: uniform mixed-precision quantization, learned top-k
//! pruning masks, and the shared-weight compressive convolution block.

use std::io::Write;
use std::rc::Rc;

use crate::autograd::{BackwardRule, Graph, Var};
use crate::error::{Result, SnasError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Positive grid levels for a `k`-bit symmetric quantizer, `2^(k-1) - 1`.
pub fn levels(bits: u32) -> f64 {
    2f64.powi(bits as i32 - 1) - 1.0
}

/// Grid step `max|W| / (2^(k-1) - 1)` for `k >= 2`.
pub fn step_size<T: Scalar>(w: &[T], bits: u32) -> T {
    let max = w.iter().fold(T::zero(), |m, x| m.max(x.abs()));
    max / T::lit(levels(bits))
}

/// Per-tensor quantization. `k >= 2`: symmetric uniform grid anchored at
/// `max|W|`, round half away from zero. `k = 1`: `sign(w) * mean|W|` with
/// `sign(0) = +1`.
pub fn quantize_values<T: Scalar>(w: &[T], bits: u32) -> Result<Vec<T>> {
    if bits == 0 {
        return Err(SnasError::invalid("bit-width must be at least 1"));
    }
    if w.is_empty() {
        return Err(SnasError::invalid("cannot quantize an empty tensor"));
    }
    if bits == 1 {
        let first = w[0].abs();
        // A tensor already on a binary grid keeps its exact magnitude.
        let mu = if w.iter().all(|x| x.abs() == first) {
            first
        } else {
            w.iter().fold(T::zero(), |a, x| a + x.abs()) / T::from_count(w.len())
        };
        return Ok(w
            .iter()
            .map(|&x| if x < T::zero() { -mu } else { mu })
            .collect());
    }
    let max = w.iter().fold(T::zero(), |m, x| m.max(x.abs()));
    if max == T::zero() {
        return Ok(vec![T::zero(); w.len()]);
    }
    let m = T::lit(levels(bits));
    let delta = max / m;
    Ok(w.iter()
        .map(|&x| {
            let n = (x / delta).round().max(-m).min(m);
            // Endpoints map to ±max exactly so that re-quantizing is a no-op.
            if n == m {
                max
            } else if n == -m {
                -max
            } else {
                n * delta
            }
        })
        .collect())
}

pub fn quantize<T: Scalar>(w: &Tensor<T>, bits: u32) -> Result<Tensor<T>> {
    Ok(Tensor::from_parts(
        w.shape().to_vec(),
        quantize_values(w.data(), bits)?,
    ))
}

fn straight_through<T: Scalar>() -> BackwardRule<T> {
    Rc::new(|ctx| vec![Some(ctx.grad_output.to_vec())])
}

/// Quantizes `w` inside the graph with a straight-through backward rule.
pub fn quantize_var<T: Scalar>(g: &mut Graph<T>, w: Var, bits: u32) -> Result<Var> {
    let q = quantize(g.value(w), bits)?;
    let v = g.discrete(w, q)?;
    g.register_custom_gradient(v, straight_through())?;
    Ok(v)
}

/// `Σ_j softmax(β)_j · Q(W, B_j)` on plain tensors.
pub fn mixed_precision_average<T: Scalar>(
    w: &Tensor<T>,
    bits: &[u32],
    beta: &[T],
) -> Result<Tensor<T>> {
    check_branches(bits, beta.len())?;
    let probs = crate::autograd::softmax_slice(beta);
    let mut out = vec![T::zero(); w.len()];
    for (&k, &p) in bits.iter().zip(&probs) {
        let q = quantize_values(w.data(), k)?;
        out.iter_mut().zip(q).for_each(|(o, v)| *o += p * v);
    }
    Ok(Tensor::from_parts(w.shape().to_vec(), out))
}

fn check_branches(bits: &[u32], n_logits: usize) -> Result<()> {
    if bits.is_empty() {
        return Err(SnasError::invalid("empty bit-width candidate set"));
    }
    if bits.len() != n_logits {
        return Err(SnasError::invalid(format!(
            "{} branch logits for {} bit-width candidates",
            n_logits,
            bits.len()
        )));
    }
    Ok(())
}

/// Graph version of [`mixed_precision_average`]; differentiable in `β`
/// exactly and in `W` through the straight-through quantizers.
pub fn mixed_precision_var<T: Scalar>(
    g: &mut Graph<T>,
    w: Var,
    bits: &[u32],
    beta: Var,
) -> Result<Var> {
    check_branches(bits, g.value(beta).len())?;
    let probs = g.softmax(beta)?;
    let mut terms = Vec::with_capacity(bits.len());
    for (j, &k) in bits.iter().enumerate() {
        let q = quantize_var(g, w, k)?;
        let pj = g.select(probs, j)?;
        terms.push(g.scale_by(q, pj)?);
    }
    g.add_n(&terms)
}

/// Number of weights kept at pruning rate `p` percent: `ceil((1 - p/100) n)`.
pub fn keep_count(n: usize, pruning_rate: f64) -> Result<usize> {
    if !(0.0..100.0).contains(&pruning_rate) {
        return Err(SnasError::invalid(format!(
            "pruning rate {pruning_rate} outside [0, 100)"
        )));
    }
    // (100 - p) * n is exact for integral p, so the quotient rounds correctly.
    Ok((((100.0 - pruning_rate) * n as f64) / 100.0).ceil() as usize)
}

/// Top-k mask over `|s|`; ties go to the lower flat index.
pub fn mask_from_scores<T: Scalar>(scores: &[T], pruning_rate: f64) -> Result<Vec<bool>> {
    let keep = keep_count(scores.len(), pruning_rate)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .abs()
            .partial_cmp(&scores[a].abs())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut mask = vec![false; scores.len()];
    for &i in &order[..keep] {
        mask[i] = true;
    }
    Ok(mask)
}

/// How a compressive convolution turns its shared weight into `W_output`.
#[derive(Clone, Debug, PartialEq)]
pub enum Precision {
    /// No quantization.
    Full,
    /// One fixed bit-width.
    Fixed(u32),
    /// Softmax mixture over candidates with the given logits var.
    Mixed { bits: Vec<u32>, beta: Var },
}

/// Pruning applied to the quantized weight.
#[derive(Clone, Debug, PartialEq)]
pub enum Pruning {
    None,
    /// Mask recomputed from the scores var at this rate.
    Scores {
        scores: Var,
        rate: f64,
    },
    /// Frozen mask; scores receive no gradient.
    Frozen(Vec<bool>),
}

/// Builds `W_output = ē(W) ⊙ mask` in the graph and returns it together with
/// the mask that was applied (all-true when unpruned).
pub fn compressed_weight<T: Scalar>(
    g: &mut Graph<T>,
    w: Var,
    precision: &Precision,
    pruning: &Pruning,
) -> Result<(Var, Vec<bool>)> {
    let e = match precision {
        Precision::Full => w,
        Precision::Fixed(k) => quantize_var(g, w, *k)?,
        Precision::Mixed { bits, beta } => mixed_precision_var(g, w, bits, *beta)?,
    };
    match pruning {
        Pruning::None => Ok((e, vec![true; g.value(w).len()])),
        Pruning::Scores { scores, rate } => {
            let mask = mask_from_scores(g.data(*scores), *rate)?;
            let out = g.apply_mask(e, *scores, mask.clone())?;
            Ok((out, mask))
        }
        Pruning::Frozen(mask) => {
            let factor = mask
                .iter()
                .map(|&m| if m { T::one() } else { T::zero() })
                .collect();
            Ok((g.mul_const(e, factor)?, mask.clone()))
        }
    }
}

/// Standalone compressive convolution: shared weight `W`, shared pruning
/// scores and branch logits `β` over the candidate bit-widths.
#[derive(Clone, Debug)]
pub struct CompConvLayer<T> {
    pub weight: Tensor<T>,
    pub scores: Tensor<T>,
    pub bits: Vec<u32>,
    pub beta: Tensor<T>,
    pub pruning_rate: f64,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> CompConvLayer<T> {
    /// Scores start as a copy of `|W|`, branch logits at zero.
    pub fn new(
        weight: Tensor<T>,
        bits: Vec<u32>,
        pruning_rate: f64,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if weight.shape().len() != 4 {
            return Err(SnasError::shape(
                "CompConvLayer",
                format!("weight {:?}", weight.shape()),
            ));
        }
        keep_count(weight.len(), pruning_rate)?;
        check_branches(&bits, bits.len())?;
        let scores = weight.map(|v| v.abs());
        let beta = Tensor::zeros(&[bits.len()]);
        Ok(CompConvLayer {
            weight,
            scores,
            beta,
            bits,
            pruning_rate,
            stride,
            padding,
        })
    }

    pub fn mask(&self) -> Result<Vec<bool>> {
        mask_from_scores(self.scores.data(), self.pruning_rate)
    }

    /// `ē(W)` on plain tensors.
    pub fn mixed_weight(&self) -> Result<Tensor<T>> {
        mixed_precision_average(&self.weight, &self.bits, self.beta.data())
    }

    pub fn output_weight(&self) -> Result<Tensor<T>> {
        let e = self.mixed_weight()?;
        let mask = self.mask()?;
        let data = e
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| if m { v } else { T::zero() })
            .collect();
        Ok(Tensor::from_parts(e.shape().to_vec(), data))
    }

    /// Binds weight, scores and logits as graph parameters and returns
    /// `(output, weight var, scores var, beta var)`.
    pub fn forward(&self, g: &mut Graph<T>, spikes_in: Var) -> Result<(Var, Var, Var, Var)> {
        let w = g.param(self.weight.clone());
        let s = g.param(self.scores.clone());
        let b = g.param(self.beta.clone());
        let (w_out, _) = compressed_weight(
            g,
            w,
            &Precision::Mixed {
                bits: self.bits.clone(),
                beta: b,
            },
            &Pruning::Scores {
                scores: s,
                rate: self.pruning_rate,
            },
        )?;
        let y = g.conv2d(spikes_in, w_out, self.stride, self.padding)?;
        Ok((y, w, s, b))
    }
}

pub fn compconv_forward<T: Scalar>(
    spikes_in: &Tensor<T>,
    layer: &CompConvLayer<T>,
) -> Result<Tensor<T>> {
    if !spikes_in.is_binary() {
        return Err(SnasError::invalid(
            "compressive convolution expects binary spike input",
        ));
    }
    let mut g = Graph::new();
    let x = g.constant(spikes_in.clone());
    let (y, ..) = layer.forward(&mut g, x)?;
    Ok(g.value(y).clone())
}

/// Reference multi-branch block: every bit-width branch owns its weight and
/// mask, and branch outputs are mixed by `softmax(β)`.
#[derive(Clone, Debug)]
pub struct NaiveBranchBlock<T> {
    pub weights: Vec<Tensor<T>>,
    pub scores: Vec<Tensor<T>>,
    pub bits: Vec<u32>,
    pub beta: Tensor<T>,
    pub pruning_rate: f64,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> NaiveBranchBlock<T> {
    /// Copies the shared weight and scores of `layer` into every branch.
    pub fn replicate(layer: &CompConvLayer<T>) -> Self {
        let n = layer.bits.len();
        NaiveBranchBlock {
            weights: vec![layer.weight.clone(); n],
            scores: vec![layer.scores.clone(); n],
            bits: layer.bits.clone(),
            beta: layer.beta.clone(),
            pruning_rate: layer.pruning_rate,
            stride: layer.stride,
            padding: layer.padding,
        }
    }

    /// Returns `(output, per-branch weight vars, beta var)`.
    pub fn forward(&self, g: &mut Graph<T>, spikes_in: Var) -> Result<(Var, Vec<Var>, Var)> {
        check_branches(&self.bits, self.beta.len())?;
        if self.weights.len() != self.bits.len() || self.scores.len() != self.bits.len() {
            return Err(SnasError::invalid(
                "naive block needs one weight and mask per branch",
            ));
        }
        let beta = g.param(self.beta.clone());
        let probs = g.softmax(beta)?;
        let mut terms = Vec::with_capacity(self.bits.len());
        let mut wvars = Vec::with_capacity(self.bits.len());
        for (j, &k) in self.bits.iter().enumerate() {
            let w = g.param(self.weights[j].clone());
            let s = g.param(self.scores[j].clone());
            let (e, _) = compressed_weight(
                g,
                w,
                &Precision::Fixed(k),
                &Pruning::Scores {
                    scores: s,
                    rate: self.pruning_rate,
                },
            )?;
            let pj = g.select(probs, j)?;
            terms.push(g.scale_by(e, pj)?);
            wvars.push(w);
        }
        let w_out = g.add_n(&terms)?;
        let y = g.conv2d(spikes_in, w_out, self.stride, self.padding)?;
        Ok((y, wvars, beta))
    }
}

pub fn naive_branch_forward<T: Scalar>(
    spikes_in: &Tensor<T>,
    block: &NaiveBranchBlock<T>,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let x = g.constant(spikes_in.clone());
    let (y, ..) = block.forward(&mut g, x)?;
    Ok(g.value(y).clone())
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistogramRow {
    pub series: &'static str,
    pub bin_center: f64,
    pub frequency: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightHistogram {
    pub rows: Vec<HistogramRow>,
    /// Pruned positions; they are also counted in the `Woutput` bin holding 0.
    pub pruned_zeros: usize,
}

impl WeightHistogram {
    pub fn series(&self, name: &str) -> Vec<&HistogramRow> {
        self.rows.iter().filter(|r| r.series == name).collect()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "series,bin_center,frequency")?;
        for r in &self.rows {
            writeln!(out, "{},{},{}", r.series, r.bin_center, r.frequency)?;
        }
        Ok(())
    }
}

/// Histograms of `W`, `ē(W)` and `W_output` on one shared symmetric range.
pub fn weight_histogram_export<T: Scalar>(
    layer: &CompConvLayer<T>,
    bins: usize,
) -> Result<WeightHistogram> {
    if bins < 2 {
        return Err(SnasError::invalid("histogram needs at least 2 bins"));
    }
    let w: Vec<f64> = layer.weight.data().iter().map(|v| v.as_f64()).collect();
    let e: Vec<f64> = layer
        .mixed_weight()?
        .data()
        .iter()
        .map(|v| v.as_f64())
        .collect();
    let out: Vec<f64> = layer
        .output_weight()?
        .data()
        .iter()
        .map(|v| v.as_f64())
        .collect();
    let range = w.iter().chain(&e).fold(0f64, |m, v| m.max(v.abs()));
    let range = if range == 0.0 { 1.0 } else { range };
    let width = 2.0 * range / bins as f64;
    let bin_of = |v: f64| (((v + range) / width).floor() as usize).min(bins - 1);
    let mut rows = Vec::with_capacity(3 * bins);
    for (name, values) in [("W", &w), ("eW", &e), ("Woutput", &out)] {
        let mut freq = vec![0usize; bins];
        for &v in values.iter() {
            freq[bin_of(v)] += 1;
        }
        for (i, f) in freq.into_iter().enumerate() {
            rows.push(HistogramRow {
                series: name,
                bin_center: -range + (i as f64 + 0.5) * width,
                frequency: f,
            });
        }
    }
    let pruned_zeros = layer.mask()?.iter().filter(|&&m| !m).count();
    Ok(WeightHistogram { rows, pruned_zeros })
}

#[cfg(test)]
mod tests;
