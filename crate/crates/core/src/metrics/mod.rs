//! Operation counting on recorded traces, model size and the 45 nm energy
//! model (0.9 pJ per addition, 3.7 pJ per multiplication).

pub mod events;
mod report;

pub use report::{
    comparison_csv, emit_report, ComparisonRow, ResourceReport, COMPARISON_CSV_HEADER,
    REPORT_CSV_HEADER,
};

use crate::arch::{CellBits, EdgeOp, ForwardOptions, Network};
use crate::autograd::Graph;
use crate::data::Batch;
use crate::error::{Result, SnasError};
use crate::objectives::{argmax, FULL_PRECISION_BITS};
use crate::scalar::Scalar;
use crate::spiking::SpikeStats;

pub use crate::arch::ConvTrace;

pub const ADD_PJ: f64 = 0.9;
pub const MULT_PJ: f64 = 3.7;

/// Energy in mJ for the given operation counts.
pub fn energy_from_counts(adds: f64, mults: f64) -> f64 {
    (adds * ADD_PJ + mults * MULT_PJ) * 1e-9
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpCategory {
    /// Accumulates triggered by input spikes.
    Synaptic,
    /// Multiply-accumulates on real-valued input.
    Mac,
    MembraneDecay,
    BatchNorm,
    Pooling,
    Classifier,
    /// Summing edge currents inside a node.
    Merge,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerOps {
    pub name: String,
    pub category: OpCategory,
    pub adds: u64,
    pub mults: u64,
}

/// Exact totals over a trace of `samples` inputs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OperationCount {
    pub layers: Vec<LayerOps>,
    pub samples: usize,
}

impl OperationCount {
    fn push(&mut self, name: &str, category: OpCategory, adds: u64, mults: u64) {
        self.layers.push(LayerOps {
            name: name.to_string(),
            category,
            adds,
            mults,
        });
    }

    pub fn adds(&self) -> u64 {
        self.layers.iter().map(|l| l.adds).sum()
    }

    pub fn mults(&self) -> u64 {
        self.layers.iter().map(|l| l.mults).sum()
    }

    pub fn synaptic_adds(&self) -> u64 {
        self.layers
            .iter()
            .filter(|l| l.category == OpCategory::Synaptic)
            .map(|l| l.adds)
            .sum()
    }

    fn per_sample(&self, v: u64) -> f64 {
        v as f64 / self.samples.max(1) as f64
    }

    pub fn adds_per_sample(&self) -> f64 {
        self.per_sample(self.adds())
    }

    pub fn mults_per_sample(&self) -> f64 {
        self.per_sample(self.mults())
    }

    pub fn synaptic_adds_per_sample(&self) -> f64 {
        self.per_sample(self.synaptic_adds())
    }
}

/// Energy of one forward pass (per sample), in mJ.
pub fn energy_estimate(counts: &OperationCount) -> f64 {
    energy_from_counts(counts.adds_per_sample(), counts.mults_per_sample())
}

/// Everything needed to count operations after a pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Trace<T> {
    pub convs: Vec<ConvTrace<T>>,
    pub stats: SpikeStats,
    pub batch: usize,
    pub steps: usize,
}

/// Evaluation-mode pass over `batch` that keeps every convolution's input.
pub fn record_trace<T: Scalar>(net: &Network<T>, batch: &Batch<T>) -> Result<Trace<T>> {
    let mut g = Graph::new();
    let bound = net.params.bind(&mut g);
    let xs: Vec<_> = batch.steps.iter().map(|x| g.constant(x.clone())).collect();
    let pass = net.forward(
        &mut g,
        &bound,
        &xs,
        ForwardOptions {
            train: false,
            record: true,
        },
    )?;
    Ok(Trace {
        convs: pass.traces,
        stats: pass.stats,
        batch: batch.len(),
        steps: xs.len(),
    })
}

fn check_trace<T>(trace: &Trace<T>) -> Result<()> {
    if trace.convs.is_empty() || trace.batch == 0 || trace.steps == 0 {
        return Err(SnasError::invalid(
            "operation counting needs a recorded trace",
        ));
    }
    Ok(())
}

/// Spiking-mode count: one addition per input spike per unpruned synapse,
/// multiply-accumulates where the input is real-valued, one multiply and
/// one add per neuron per timestep for the leak, plus batch norm, node
/// merges, pooling and the readout.
pub fn count_operations<T: Scalar>(net: &Network<T>, trace: &Trace<T>) -> Result<OperationCount> {
    check_trace(trace)?;
    let mut out = OperationCount {
        layers: Vec::new(),
        samples: trace.batch,
    };
    for conv in &trace.convs {
        let binary = conv.inputs.iter().all(|x| x.is_binary());
        if binary {
            let adds = conv
                .inputs
                .iter()
                .map(|x| events::synaptic_events(&conv.geometry, x.data(), Some(&conv.mask)))
                .sum();
            out.push(&conv.name, OpCategory::Synaptic, adds, 0);
        } else {
            let macs = events::dense_macs(&conv.geometry, &conv.mask) * conv.inputs.len() as u64;
            out.push(&conv.name, OpCategory::Mac, macs, macs);
        }
    }
    for layer in &trace.stats.layers {
        let n = (layer.neurons * layer.batch * layer.counts.len()) as u64;
        out.push(&layer.name, OpCategory::MembraneDecay, n, n);
    }
    let steps = trace.steps as u64;
    let batch = trace.batch as u64;
    let stem = &net.stem.conv;
    let (h, w) = stem.out_hw();
    let bn = (stem.c_out * h * w) as u64 * batch * steps;
    out.push("stem.bn", OpCategory::BatchNorm, bn, bn);
    for cell in &net.cells {
        let neurons = (cell.node_channels * cell.out_h * cell.out_w) as u64;
        for node in 0..net.profile.nodes {
            let edges: Vec<_> = cell
                .edges
                .iter()
                .filter(|e| e.node == node && e.enabled)
                .collect();
            let mixed = edges.iter().filter(|e| e.op == EdgeOp::Mixed).count() as u64;
            // mixed edges: two weighted terms per edge
            let terms = edges.len() as u64 + mixed;
            let adds = terms.saturating_sub(1) * neurons * batch * steps;
            let mults = 2 * mixed * neurons * batch * steps;
            out.push(
                &format!("cell{}.node{node}.merge", cell.index),
                OpCategory::Merge,
                adds,
                mults,
            );
        }
    }
    let last = net
        .cells
        .last()
        .ok_or_else(|| SnasError::invalid("network has no cells"))?;
    let head = &net.classifier;
    let hw = (last.out_h * last.out_w) as u64;
    let c = head.in_features as u64;
    out.push(
        "pool",
        OpCategory::Pooling,
        c * (hw - 1) * batch * steps,
        c * batch * steps,
    );
    let fc = (head.in_features * head.out_features) as u64 * batch * steps;
    out.push(&head.name, OpCategory::Classifier, fc, fc);
    Ok(out)
}

/// The same topology run as a conventional network: every synapse is a
/// multiply-accumulate, so additions equal multiplications.
pub fn count_operations_ann<T: Scalar>(
    net: &Network<T>,
    trace: &Trace<T>,
) -> Result<OperationCount> {
    check_trace(trace)?;
    let mut out = OperationCount {
        layers: Vec::new(),
        samples: trace.batch,
    };
    for conv in &trace.convs {
        let macs = events::dense_macs(&conv.geometry, &conv.mask) * conv.inputs.len() as u64;
        out.push(&conv.name, OpCategory::Mac, macs, macs);
    }
    let fc = (net.classifier.in_features * net.classifier.out_features * trace.batch * trace.steps)
        as u64;
    out.push(&net.classifier.name, OpCategory::Classifier, fc, fc);
    Ok(out)
}

/// Decoded (argmax) bit-width of a cell.
pub fn cell_bitwidth<T: Scalar>(net: &Network<T>, bits: CellBits) -> u32 {
    match bits {
        CellBits::Fixed(k) => k,
        CellBits::Searched(id) => net.space.bits[argmax(net.params.value(id).data())],
    }
}

/// `(compressed bits, dense 32-bit bits)` of the deployed network: stem,
/// every reachable cell convolution and the classifier. The auxiliary head
/// is training-only and excluded.
pub fn model_bits<T: Scalar>(net: &Network<T>) -> (f64, f64) {
    let full = FULL_PRECISION_BITS as f64;
    let io = net.space.io_bits as f64;
    let stem = net.stem.conv.params() as f64;
    let bn = 2.0 * net.stem.conv.c_out as f64;
    let fc = (net.classifier.in_features * net.classifier.out_features
        + net.classifier.out_features) as f64;
    let mut bits = io * (stem + fc) + full * bn;
    let mut dense = full * (stem + fc + bn);
    let keep = 1.0 - net.space.pruning_rate / 100.0;
    for cell in &net.cells {
        let b = cell_bitwidth(net, cell.bits) as f64;
        for unit in cell.convs() {
            let params = unit.params() as f64;
            let pruned = net.is_pruned(unit);
            bits += b * params * if pruned { keep } else { 1.0 };
            dense += full * params;
        }
    }
    (bits, dense)
}

pub fn bits_to_mb(bits: f64) -> f64 {
    bits / 8.0 / (1u64 << 20) as f64
}

/// Deployed model size in binary megabytes.
pub fn model_size<T: Scalar>(net: &Network<T>) -> f64 {
    bits_to_mb(model_bits(net).0)
}

/// Formula SynOps and bit-SynOps per sample from the rates in a trace:
/// `Σ (1-p) k_h k_w C_in C_out H W Σ_t s_t`, bit-weighted for the second.
pub fn trace_synops<T: Scalar>(trace: &Trace<T>) -> (f64, f64) {
    let mut synops = 0.0;
    let mut bit_synops = 0.0;
    for conv in &trace.convs {
        if !conv.inputs.iter().all(|x| x.is_binary()) {
            continue;
        }
        let g = &conv.geometry;
        let s: f64 = conv
            .inputs
            .iter()
            .map(|x| events::receptive_field_rate(g, x.data()))
            .sum();
        let keep = 1.0 - conv.pruning_rate / 100.0;
        let v = keep * (g.col_rows() * g.c_out * g.out_h() * g.out_w()) as f64 * s * conv.op_weight;
        synops += v;
        bit_synops += v * conv.bits as f64;
    }
    (synops, bit_synops)
}
