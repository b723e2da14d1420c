use std::collections::BTreeMap;

use rand::Rng;

use super::params::{Bound, ParamGroup, ParamId, ParamStore};
use super::{Architecture, BackboneProfile, OpKind, SearchSpace};
use crate::autograd::conv::{out_dim, ConvGeometry};
use crate::autograd::{Graph, Var};
use crate::compression::{compressed_weight, quantize_var, Precision, Pruning};
use crate::error::{Result, SnasError};
use crate::metrics::events::receptive_field_rate;
use crate::objectives::{BitSource, CostTermVar, LayerCostDescriptor, FULL_PRECISION_BITS};
use crate::scalar::Scalar;
use crate::spiking::{lif_sequence, SpikeStats};
use crate::tensor::Tensor;

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// A convolution inside the network. Stem convolutions carry no scores.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvUnit {
    pub name: String,
    pub weight: ParamId,
    pub scores: Option<ParamId>,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_h: usize,
    pub in_w: usize,
}

impl ConvUnit {
    pub fn geometry(&self, batch: usize) -> ConvGeometry {
        ConvGeometry {
            batch,
            c_in: self.c_in,
            h: self.in_h,
            w: self.in_w,
            c_out: self.c_out,
            kh: self.kernel,
            kw: self.kernel,
            stride: self.stride,
            pad: self.pad,
        }
    }

    pub fn params(&self) -> usize {
        self.c_out * self.c_in * self.kernel * self.kernel
    }

    pub fn out_hw(&self) -> (usize, usize) {
        (
            out_dim(self.in_h, self.kernel, self.stride, self.pad),
            out_dim(self.in_w, self.kernel, self.stride, self.pad),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EdgeOp {
    /// Softmax(α) mixture of conv and skip.
    Mixed,
    Fixed(OpKind),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EdgeUnit {
    /// Source state: 0 and 1 are the cell inputs, `2 + i` is node `i`.
    pub from: usize,
    pub node: usize,
    /// Row of the cell's α matrix.
    pub row: usize,
    /// Stride-2 edge of a reduction cell.
    pub reduce: bool,
    pub op: EdgeOp,
    pub conv: Option<ConvUnit>,
    pub enabled: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CellBits {
    Searched(ParamId),
    Fixed(u32),
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellUnit {
    /// 1-based position in the backbone.
    pub index: usize,
    pub reduction: bool,
    pub node_channels: usize,
    pub pre_a: ConvUnit,
    pub pre_b: ConvUnit,
    pub edges: Vec<EdgeUnit>,
    pub alpha: Option<ParamId>,
    pub bits: CellBits,
    pub out_h: usize,
    pub out_w: usize,
}

impl CellUnit {
    pub fn out_channels(&self, nodes: usize) -> usize {
        self.node_channels * nodes
    }

    /// Every convolution of the cell that can run: preprocessing first,
    /// then enabled edge convolutions in edge order.
    pub fn convs(&self) -> impl Iterator<Item = &ConvUnit> {
        [&self.pre_a, &self.pre_b].into_iter().chain(
            self.edges
                .iter()
                .filter(|e| e.enabled && e.op != EdgeOp::Fixed(OpKind::Skip))
                .filter_map(|e| e.conv.as_ref()),
        )
    }
}

/// Conv → batch norm (statistics shared over timesteps) → LIF.
#[derive(Clone, Debug, PartialEq)]
pub struct Stem<T> {
    pub conv: ConvUnit,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

/// Global average pooling followed by a linear readout.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearUnit {
    pub name: String,
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
    /// Cell whose output feeds the head.
    pub after_cell: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TimestepMode {
    /// ψ logits over `1..=t_max`.
    Searched(ParamId),
    Fixed(usize),
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ForwardOptions {
    /// Batch statistics in the stem (and report them for running averages).
    pub train: bool,
    /// Keep every convolution's input spikes for operation counting.
    pub record: bool,
}

/// Input spikes seen by one convolution over a pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvTrace<T> {
    pub name: String,
    pub geometry: ConvGeometry,
    pub mask: Vec<bool>,
    pub bits: u32,
    /// Pruning rate applied to this layer, percent.
    pub pruning_rate: f64,
    /// Mixture weight of the conv on its edge (1 outside the supernet).
    pub op_weight: f64,
    pub inputs: Vec<Tensor<T>>,
}

#[derive(Debug)]
pub struct ForwardPass<T> {
    /// `[batch, classes]` per timestep.
    pub logits: Vec<Var>,
    pub aux_logits: Vec<Var>,
    /// Relative timestep weights (one-hot on the last step for fixed counts).
    pub psi_probs: Var,
    pub cost_terms: Vec<CostTermVar>,
    pub stats: SpikeStats,
    /// Stem batch mean and variance when run in training mode.
    pub bn_batch: Option<(Vec<T>, Vec<T>)>,
    pub traces: Vec<ConvTrace<T>>,
}

struct PassCtx<T> {
    batch: usize,
    record: bool,
    cost_terms: Vec<CostTermVar>,
    stats: SpikeStats,
    traces: Vec<ConvTrace<T>>,
}

/// A spiking network over the cell search space: the supernet during search
/// and the single-branch network after decoding share this type.
#[derive(Clone, Debug)]
pub struct Network<T> {
    pub profile: BackboneProfile,
    pub space: SearchSpace,
    pub params: ParamStore<T>,
    pub stem: Stem<T>,
    pub cells: Vec<CellUnit>,
    pub classifier: LinearUnit,
    pub aux: Option<LinearUnit>,
    pub timesteps: TimestepMode,
    /// Masks applied verbatim instead of re-ranking scores, by conv name.
    pub frozen_masks: BTreeMap<String, Vec<bool>>,
}

fn he_uniform<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Result<Tensor<T>> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| T::lit(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::new(shape.to_vec(), data)
}

fn precision_for(bits: u32) -> Precision {
    if bits >= FULL_PRECISION_BITS {
        Precision::Full
    } else {
        Precision::Fixed(bits)
    }
}

struct Builder<'a, T, R> {
    params: ParamStore<T>,
    rng: &'a mut R,
}

impl<T: Scalar, R: Rng> Builder<'_, T, R> {
    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        name: String,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        in_hw: (usize, usize),
        scored: bool,
    ) -> Result<ConvUnit> {
        let fan_in = c_in * kernel * kernel;
        let w: Tensor<T> = he_uniform(self.rng, &[c_out, c_in, kernel, kernel], fan_in)?;
        let scores = if scored {
            Some(self.params.add(
                format!("{name}.scores"),
                ParamGroup::Arch,
                w.map(|v| v.abs()),
            )?)
        } else {
            None
        };
        let weight = self
            .params
            .add(format!("{name}.weight"), ParamGroup::Weights, w)?;
        Ok(ConvUnit {
            name,
            weight,
            scores,
            c_in,
            c_out,
            kernel,
            stride,
            pad: kernel / 2,
            in_h: in_hw.0,
            in_w: in_hw.1,
        })
    }

    fn linear(
        &mut self,
        name: &str,
        in_features: usize,
        out_features: usize,
        after_cell: usize,
    ) -> Result<LinearUnit> {
        let bound = 1.0 / (in_features as f64).sqrt();
        let mut uniform = |n: usize| -> Vec<T> {
            (0..n)
                .map(|_| T::lit(self.rng.gen_range(-bound..bound)))
                .collect()
        };
        let w = Tensor::new(
            vec![out_features, in_features],
            uniform(in_features * out_features),
        )?;
        let b = Tensor::new(vec![out_features], uniform(out_features))?;
        Ok(LinearUnit {
            name: name.to_string(),
            weight: self
                .params
                .add(format!("{name}.weight"), ParamGroup::Weights, w)?,
            bias: self
                .params
                .add(format!("{name}.bias"), ParamGroup::Weights, b)?,
            in_features,
            out_features,
            after_cell,
        })
    }
}

impl<T: Scalar> Network<T> {
    /// Supernet: every edge mixes conv and skip, every cell searches its
    /// bit-width over `space.bits`, and ψ spans `1..=space.t_max`.
    pub fn supernet<R: Rng>(
        profile: &BackboneProfile,
        space: &SearchSpace,
        rng: &mut R,
    ) -> Result<Self> {
        Self::build(profile, space, None, None, false, rng)
    }

    /// Single-branch network for a decoded architecture, optionally with an
    /// auxiliary head after cell `aux_cell` (1-based).
    pub fn decoded<R: Rng>(
        profile: &BackboneProfile,
        space: &SearchSpace,
        arch: &Architecture,
        aux_cell: Option<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        arch.check_against(profile, space)?;
        Self::build(profile, space, Some(arch), aux_cell, false, rng)
    }

    /// Fixed topology and timestep count from `arch`, but every cell searches
    /// its bit-width over `space.bits` (the bit-widths in `arch` are ignored).
    pub fn bit_search<R: Rng>(
        profile: &BackboneProfile,
        space: &SearchSpace,
        arch: &Architecture,
        rng: &mut R,
    ) -> Result<Self> {
        let mut probe = arch.clone();
        let first = *space
            .bits
            .first()
            .ok_or_else(|| SnasError::Config("no bit-width candidates".into()))?;
        for c in &mut probe.cells {
            c.bits = first;
        }
        probe.check_against(profile, space)?;
        Self::build(profile, space, Some(&probe), None, true, rng)
    }

    fn build<R: Rng>(
        profile: &BackboneProfile,
        space: &SearchSpace,
        arch: Option<&Architecture>,
        aux_cell: Option<usize>,
        search_bits: bool,
        rng: &mut R,
    ) -> Result<Self> {
        profile.validate()?;
        space.validate()?;
        if let Some(a) = aux_cell {
            if a == 0 || a > profile.cells {
                return Err(SnasError::Config(format!(
                    "auxiliary cell {a} outside 1..={}",
                    profile.cells
                )));
            }
        }
        let mut b = Builder {
            params: ParamStore::new(),
            rng,
        };
        let c0 = profile.init_channels;
        let (h0, w0) = (profile.height, profile.width);
        let stem_conv = b.conv(
            "stem.conv".into(),
            profile.in_channels,
            c0,
            3,
            1,
            (h0, w0),
            false,
        )?;
        let gamma = b.params.add(
            "stem.bn.gamma",
            ParamGroup::Weights,
            Tensor::full(&[c0], T::one()),
        )?;
        let beta = b
            .params
            .add("stem.bn.beta", ParamGroup::Weights, Tensor::zeros(&[c0]))?;
        let stem = Stem {
            conv: stem_conv,
            gamma,
            beta,
            running_mean: vec![T::zero(); c0],
            running_var: vec![T::one(); c0],
        };

        let nodes = profile.nodes;
        let rows = nodes * (nodes + 3) / 2;
        let mut shared_alpha: [Option<ParamId>; 2] = [None, None];
        // (channels, h, w) of the two most recent outputs
        let mut pp = (c0, h0, w0);
        let mut p = (c0, h0, w0);
        let mut c_node = c0;
        let mut cells = Vec::with_capacity(profile.cells);
        let mut aux_features = None;
        for k in 1..=profile.cells {
            let reduction = profile.is_reduction(k);
            if reduction {
                c_node *= 2;
            }
            let c_pre = if reduction { c_node / 2 } else { c_node };
            let stride_a = if (pp.1, pp.2) == (p.1, p.2) { 1 } else { 2 };
            if (out_dim(pp.1, 1, stride_a, 0), out_dim(pp.2, 1, stride_a, 0)) != (p.1, p.2) {
                return Err(SnasError::Config(format!(
                    "cell {k}: inputs of {}x{} and {}x{} cannot be aligned",
                    pp.1, pp.2, p.1, p.2
                )));
            }
            let pre_a = b.conv(
                format!("cell{k}.pre_a"),
                pp.0,
                c_pre,
                1,
                stride_a,
                (pp.1, pp.2),
                true,
            )?;
            let pre_b = b.conv(format!("cell{k}.pre_b"), p.0, c_pre, 1, 1, (p.1, p.2), true)?;
            let (out_h, out_w) = if reduction {
                (out_dim(p.1, 3, 2, 1), out_dim(p.2, 3, 2, 1))
            } else {
                (p.1, p.2)
            };
            let genes = arch.map(|a| &a.cells[k - 1]);
            let mut edges = Vec::new();
            let mut row = 0;
            for node in 0..nodes {
                for from in 0..node + 2 {
                    let op = match genes {
                        None => Some(EdgeOp::Mixed),
                        Some(c) => c
                            .edges
                            .iter()
                            .find(|e| e.node == node && e.from == from)
                            .map(|e| EdgeOp::Fixed(e.op)),
                    };
                    if let Some(op) = op {
                        let reduce = reduction && from < 2;
                        let (c_in, in_hw) = if from < 2 {
                            (c_pre, (p.1, p.2))
                        } else {
                            (c_node, (out_h, out_w))
                        };
                        let conv = if op == EdgeOp::Fixed(OpKind::Skip) {
                            None
                        } else {
                            let stride = if reduce { 2 } else { 1 };
                            Some(b.conv(
                                format!("cell{k}.edge{from}_{node}"),
                                c_in,
                                c_node,
                                3,
                                stride,
                                in_hw,
                                true,
                            )?)
                        };
                        edges.push(EdgeUnit {
                            from,
                            node,
                            row,
                            reduce,
                            op,
                            conv,
                            enabled: true,
                        });
                    }
                    row += 1;
                }
            }
            let alpha = if arch.is_some() {
                None
            } else if space.share_alpha {
                let slot = usize::from(reduction);
                if shared_alpha[slot].is_none() {
                    let name = if reduction {
                        "alpha.reduce"
                    } else {
                        "alpha.normal"
                    };
                    shared_alpha[slot] = Some(b.params.add(
                        name,
                        ParamGroup::Arch,
                        Tensor::zeros(&[rows, 2]),
                    )?);
                }
                shared_alpha[slot]
            } else {
                Some(b.params.add(
                    format!("cell{k}.alpha"),
                    ParamGroup::Arch,
                    Tensor::zeros(&[rows, 2]),
                )?)
            };
            let bits = match genes {
                Some(c) if !search_bits => CellBits::Fixed(c.bits),
                _ if space.bits.len() == 1 => CellBits::Fixed(space.bits[0]),
                _ => CellBits::Searched(b.params.add(
                    format!("cell{k}.beta"),
                    ParamGroup::Arch,
                    Tensor::zeros(&[space.bits.len()]),
                )?),
            };
            cells.push(CellUnit {
                index: k,
                reduction,
                node_channels: c_node,
                pre_a,
                pre_b,
                edges,
                alpha,
                bits,
                out_h,
                out_w,
            });
            pp = p;
            p = (c_node * nodes, out_h, out_w);
            if aux_cell == Some(k) {
                aux_features = Some(p.0);
            }
        }
        let classifier = b.linear("classifier", p.0, profile.classes, profile.cells)?;
        let aux = match (aux_cell, aux_features) {
            (Some(k), Some(f)) => Some(b.linear("aux", f, profile.classes, k)?),
            _ => None,
        };
        let timesteps = match arch {
            Some(a) => TimestepMode::Fixed(a.timesteps),
            None => TimestepMode::Searched(b.params.add(
                "psi",
                ParamGroup::Arch,
                Tensor::zeros(&[space.t_max]),
            )?),
        };
        Ok(Network {
            profile: profile.clone(),
            space: space.clone(),
            params: b.params,
            stem,
            cells,
            classifier,
            aux,
            timesteps,
            frozen_masks: BTreeMap::new(),
        })
    }

    /// Number of timesteps a training pass unrolls.
    pub fn steps(&self) -> usize {
        match self.timesteps {
            TimestepMode::Searched(_) => self.space.t_max,
            TimestepMode::Fixed(t) => t,
        }
    }

    pub fn cell_bits(&self, cell: &CellUnit) -> Vec<u32> {
        match cell.bits {
            CellBits::Fixed(k) => vec![k],
            CellBits::Searched(_) => self.space.bits.clone(),
        }
    }

    /// Current keep pattern of a scored convolution.
    pub fn mask(&self, unit: &ConvUnit) -> Result<Vec<bool>> {
        if let Some(m) = self.frozen_masks.get(&unit.name) {
            return Ok(m.clone());
        }
        match unit.scores {
            Some(s) if self.space.pruning_rate > 0.0 => crate::compression::mask_from_scores(
                self.params.value(s).data(),
                self.space.pruning_rate,
            ),
            _ => Ok(vec![true; unit.params()]),
        }
    }

    /// Snapshot of every current mask, suitable for `frozen_masks`.
    pub fn current_masks(&self) -> Result<BTreeMap<String, Vec<bool>>> {
        let mut out = BTreeMap::new();
        for cell in &self.cells {
            for unit in cell.convs() {
                out.insert(unit.name.clone(), self.mask(unit)?);
            }
        }
        Ok(out)
    }

    fn pruning_for(&self, bound: &Bound, unit: &ConvUnit) -> Pruning {
        if let Some(m) = self.frozen_masks.get(&unit.name) {
            return Pruning::Frozen(m.clone());
        }
        match unit.scores {
            Some(s) if self.space.pruning_rate > 0.0 => Pruning::Scores {
                scores: bound[s],
                rate: self.space.pruning_rate,
            },
            _ => Pruning::None,
        }
    }

    pub fn is_pruned(&self, unit: &ConvUnit) -> bool {
        self.frozen_masks.contains_key(&unit.name)
            || (unit.scores.is_some() && self.space.pruning_rate > 0.0)
    }

    /// Moves the stem's running statistics towards a batch estimate.
    pub fn update_running_stats(&mut self, mean: &[T], var: &[T]) {
        let m = T::lit(BN_MOMENTUM);
        for (r, &b) in self.stem.running_mean.iter_mut().zip(mean) {
            *r = (T::one() - m) * *r + m * b;
        }
        for (r, &b) in self.stem.running_var.iter_mut().zip(var) {
            *r = (T::one() - m) * *r + m * b;
        }
    }

    /// Unrolls the network over `inputs` (one `[batch, c, h, w]` var per
    /// timestep), every neuron starting from rest.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        inputs: &[Var],
        opts: ForwardOptions,
    ) -> Result<ForwardPass<T>> {
        let steps = inputs.len();
        if steps == 0 {
            return Err(SnasError::invalid("forward needs at least one timestep"));
        }
        let psi_probs = match self.timesteps {
            TimestepMode::Searched(id) => {
                if steps != self.space.t_max {
                    return Err(SnasError::invalid(format!(
                        "searched timesteps need {} input steps, got {steps}",
                        self.space.t_max
                    )));
                }
                g.softmax(bound[id])?
            }
            TimestepMode::Fixed(_) => {
                let mut w = vec![T::zero(); steps];
                w[steps - 1] = T::one();
                g.constant(Tensor::from_vec(w))
            }
        };
        let expect = [
            self.profile.in_channels,
            self.profile.height,
            self.profile.width,
        ];
        let shape = g.shape(inputs[0]).to_vec();
        if shape.len() != 4 || shape[1..] != expect {
            return Err(SnasError::shape(
                "network input",
                format!("expected [b, {expect:?}], got {shape:?}"),
            ));
        }
        let batch = shape[0];
        let mut ctx = PassCtx {
            batch,
            record: opts.record,
            cost_terms: Vec::new(),
            stats: SpikeStats::default(),
            traces: Vec::new(),
        };

        // stem
        let unit = &self.stem.conv;
        let w_stem = if self.space.io_bits < FULL_PRECISION_BITS {
            quantize_var(g, bound[unit.weight], self.space.io_bits)?
        } else {
            bound[unit.weight]
        };
        let binary_input = inputs.iter().all(|&x| g.value(x).is_binary());
        let dense = vec![true; unit.params()];
        let currents = self.conv_layer(
            g,
            unit,
            w_stem,
            &dense,
            inputs,
            BitSource::Fixed(self.space.io_bits),
            None,
            binary_input,
            false,
            &mut ctx,
        )?;
        let stacked = g.concat(&currents, 0)?;
        let (gamma, beta) = (bound[self.stem.gamma], bound[self.stem.beta]);
        let eps = T::lit(BN_EPS);
        let (normed, bn_batch) = if opts.train {
            let (y, mean, var) = g.batch_norm(stacked, gamma, beta, eps)?;
            (y, Some((mean, var)))
        } else {
            let y = g.batch_norm_eval(
                stacked,
                gamma,
                beta,
                &self.stem.running_mean,
                &self.stem.running_var,
                eps,
            )?;
            (y, None)
        };
        let per_step = (0..steps)
            .map(|t| g.slice(normed, 0, t * batch, batch))
            .collect::<Result<Vec<_>>>()?;
        let stem_spikes = self.neurons(g, "stem", &per_step, &mut ctx)?;

        let mut outs = vec![stem_spikes];
        for cell in &self.cells {
            let k = cell.index;
            let a = outs[k.max(2) - 2].clone();
            let b = outs[k - 1].clone();
            let y = self.cell_forward(g, bound, cell, &a, &b, &mut ctx)?;
            outs.push(y);
        }
        let logits = self.head(
            g,
            bound,
            &self.classifier,
            &outs[self.profile.cells],
            &mut ctx,
        )?;
        let aux_logits = match &self.aux {
            Some(h) => self.head(g, bound, h, &outs[h.after_cell], &mut ctx)?,
            None => Vec::new(),
        };
        Ok(ForwardPass {
            logits,
            aux_logits,
            psi_probs,
            cost_terms: ctx.cost_terms,
            stats: ctx.stats,
            bn_batch,
            traces: ctx.traces,
        })
    }

    fn scratch_ctx(batch: usize) -> PassCtx<T> {
        PassCtx {
            batch,
            record: false,
            cost_terms: Vec::new(),
            stats: SpikeStats::default(),
            traces: Vec::new(),
        }
    }

    /// Output of edge `edge` of cell `cell` (1-based) at every timestep of `x`.
    pub fn mixed_edge_forward(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        cell: usize,
        edge: usize,
        x: &[Var],
    ) -> Result<Vec<Var>> {
        let c = self.cell_at(cell)?;
        let e = c
            .edges
            .get(edge)
            .ok_or_else(|| SnasError::invalid(format!("cell {cell} has no edge {edge}")))?;
        let batch = x.first().map_or(0, |&v| g.shape(v)[0]);
        self.edge_forward(g, bound, c, e, x, &mut Self::scratch_ctx(batch))
    }

    /// Spiking output of cell `cell` (1-based) for the two input sequences.
    pub fn cell_outputs(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        cell: usize,
        a: &[Var],
        b: &[Var],
    ) -> Result<(Vec<Var>, SpikeStats)> {
        let c = self.cell_at(cell)?;
        if a.len() != b.len() || a.is_empty() {
            return Err(SnasError::invalid(
                "cell inputs need the same, non-zero number of timesteps",
            ));
        }
        let mut ctx = Self::scratch_ctx(g.shape(a[0])[0]);
        let y = self.cell_forward(g, bound, c, a, b, &mut ctx)?;
        Ok((y, ctx.stats))
    }

    fn cell_at(&self, cell: usize) -> Result<&CellUnit> {
        cell.checked_sub(1)
            .and_then(|i| self.cells.get(i))
            .ok_or_else(|| SnasError::invalid(format!("no cell {cell}")))
    }

    fn neurons(
        &self,
        g: &mut Graph<T>,
        name: &str,
        currents: &[Var],
        ctx: &mut PassCtx<T>,
    ) -> Result<Vec<Var>> {
        let params = self.space.neuron.params::<T>();
        let spikes = lif_sequence(g, currents, &params)?;
        for &s in &spikes {
            ctx.stats.record(name, g.value(s));
        }
        Ok(spikes)
    }

    /// Runs one convolution at every timestep and books its cost term.
    #[allow(clippy::too_many_arguments)]
    fn conv_layer(
        &self,
        g: &mut Graph<T>,
        unit: &ConvUnit,
        w_eff: Var,
        mask: &[bool],
        inputs: &[Var],
        bits: BitSource,
        op_weight: Option<Var>,
        spiking_input: bool,
        pruned: bool,
        ctx: &mut PassCtx<T>,
    ) -> Result<Vec<Var>> {
        let geom = unit.geometry(ctx.batch);
        let mut rates = Vec::with_capacity(inputs.len());
        let mut outs = Vec::with_capacity(inputs.len());
        for &x in inputs {
            let expect = [ctx.batch, unit.c_in, unit.in_h, unit.in_w];
            if g.shape(x) != expect {
                return Err(SnasError::shape(
                    "conv input",
                    format!("{}: expected {expect:?}, got {:?}", unit.name, g.shape(x)),
                ));
            }
            rates.push(if spiking_input {
                receptive_field_rate(&geom, g.data(x))
            } else {
                0.0
            });
            outs.push(g.conv2d(x, w_eff, unit.stride, unit.pad)?);
        }
        if ctx.record {
            let eff_bits = match &bits {
                BitSource::Fixed(k) => *k,
                BitSource::Mixed { beta, bits } => bits[crate::objectives::argmax(g.data(*beta))],
            };
            ctx.traces.push(ConvTrace {
                name: unit.name.clone(),
                geometry: geom,
                mask: mask.to_vec(),
                bits: eff_bits,
                pruning_rate: if pruned { self.space.pruning_rate } else { 0.0 },
                op_weight: op_weight.map_or(1.0, |w| g.item(w).as_f64()),
                inputs: inputs.iter().map(|&x| g.value(x).clone()).collect(),
            });
        }
        let (h, w) = unit.out_hw();
        ctx.cost_terms.push(CostTermVar {
            layer: LayerCostDescriptor {
                name: unit.name.clone(),
                kh: unit.kernel,
                kw: unit.kernel,
                c_in: unit.c_in,
                c_out: unit.c_out,
                h,
                w,
                pruning_rate: if pruned { self.space.pruning_rate } else { 0.0 },
                rates,
            },
            bits,
            op_weight,
        });
        Ok(outs)
    }

    #[allow(clippy::too_many_arguments)]
    fn cell_conv(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        cell: &CellUnit,
        unit: &ConvUnit,
        inputs: &[Var],
        op_weight: Option<Var>,
        ctx: &mut PassCtx<T>,
    ) -> Result<Vec<Var>> {
        let (precision, bits) = match cell.bits {
            CellBits::Fixed(k) => (precision_for(k), BitSource::Fixed(k)),
            CellBits::Searched(id) => (
                Precision::Mixed {
                    bits: self.space.bits.clone(),
                    beta: bound[id],
                },
                BitSource::Mixed {
                    beta: bound[id],
                    bits: self.space.bits.clone(),
                },
            ),
        };
        let pruning = self.pruning_for(bound, unit);
        let (w_eff, mask) = compressed_weight(g, bound[unit.weight], &precision, &pruning)?;
        let pruned = self.is_pruned(unit);
        self.conv_layer(
            g, unit, w_eff, &mask, inputs, bits, op_weight, true, pruned, ctx,
        )
    }

    fn cell_forward(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        cell: &CellUnit,
        a: &[Var],
        b: &[Var],
        ctx: &mut PassCtx<T>,
    ) -> Result<Vec<Var>> {
        let k = cell.index;
        let ia = self.cell_conv(g, bound, cell, &cell.pre_a, a, None, ctx)?;
        let sa = self.neurons(g, &format!("cell{k}.pre_a"), &ia, ctx)?;
        let ib = self.cell_conv(g, bound, cell, &cell.pre_b, b, None, ctx)?;
        let sb = self.neurons(g, &format!("cell{k}.pre_b"), &ib, ctx)?;
        let mut states = vec![sa, sb];
        let steps = a.len();
        for node in 0..self.profile.nodes {
            let mut per_edge: Vec<Vec<Var>> = Vec::new();
            for edge in cell.edges.iter().filter(|e| e.node == node && e.enabled) {
                let x = states[edge.from].clone();
                per_edge.push(self.edge_forward(g, bound, cell, edge, &x, ctx)?);
            }
            if per_edge.is_empty() {
                return Err(SnasError::invalid(format!(
                    "cell {k} node {node} has no enabled incoming edge"
                )));
            }
            let mut currents = Vec::with_capacity(steps);
            for t in 0..steps {
                let terms: Vec<Var> = per_edge.iter().map(|e| e[t]).collect();
                currents.push(g.add_n(&terms)?);
            }
            let spikes = self.neurons(g, &format!("cell{k}.node{node}"), &currents, ctx)?;
            states.push(spikes);
        }
        (0..steps)
            .map(|t| {
                let nodes: Vec<Var> = states[2..].iter().map(|s| s[t]).collect();
                g.concat(&nodes, 1)
            })
            .collect()
    }

    fn edge_forward(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        cell: &CellUnit,
        edge: &EdgeUnit,
        x: &[Var],
        ctx: &mut PassCtx<T>,
    ) -> Result<Vec<Var>> {
        let skip = |g: &mut Graph<T>| -> Result<Vec<Var>> {
            if edge.reduce {
                x.iter().map(|&v| g.subsample_dup(v)).collect()
            } else {
                Ok(x.to_vec())
            }
        };
        let conv_unit = || {
            edge.conv.as_ref().ok_or_else(|| {
                SnasError::invalid(format!(
                    "cell {} edge {}->{} lacks a conv",
                    cell.index, edge.from, edge.node
                ))
            })
        };
        match edge.op {
            EdgeOp::Fixed(OpKind::Skip) => skip(g),
            EdgeOp::Fixed(OpKind::Conv3x3) => {
                self.cell_conv(g, bound, cell, conv_unit()?, x, None, ctx)
            }
            EdgeOp::Mixed => {
                let alpha = cell.alpha.ok_or_else(|| {
                    SnasError::invalid(format!("cell {} has mixed edges but no α", cell.index))
                })?;
                let row = g.slice(bound[alpha], 0, edge.row, 1)?;
                let row = g.reshape(row, &[OpKind::ALL.len()])?;
                let probs = g.softmax(row)?;
                let w_conv = g.select(probs, OpKind::Conv3x3.index())?;
                let w_skip = g.select(probs, OpKind::Skip.index())?;
                let conv = self.cell_conv(g, bound, cell, conv_unit()?, x, Some(w_conv), ctx)?;
                let sk = skip(g)?;
                conv.into_iter()
                    .zip(sk)
                    .map(|(c, s)| {
                        let c = g.scale_by(c, w_conv)?;
                        let s = g.scale_by(s, w_skip)?;
                        g.add(c, s)
                    })
                    .collect()
            }
        }
    }

    fn head(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        head: &LinearUnit,
        xs: &[Var],
        ctx: &mut PassCtx<T>,
    ) -> Result<Vec<Var>> {
        let w = if self.space.io_bits < FULL_PRECISION_BITS {
            quantize_var(g, bound[head.weight], self.space.io_bits)?
        } else {
            bound[head.weight]
        };
        let steps = xs.len();
        if head.after_cell == self.profile.cells && head.name == self.classifier.name {
            ctx.cost_terms.push(CostTermVar {
                layer: LayerCostDescriptor {
                    name: head.name.clone(),
                    kh: 1,
                    kw: 1,
                    c_in: head.in_features,
                    c_out: head.out_features,
                    h: 1,
                    w: 1,
                    pruning_rate: 0.0,
                    rates: vec![0.0; steps],
                },
                bits: BitSource::Fixed(self.space.io_bits),
                op_weight: None,
            });
        }
        xs.iter()
            .map(|&x| {
                let pooled = g.mean_axes(x, &[2, 3])?;
                g.linear(pooled, w, bound[head.bias])
            })
            .collect()
    }
}
