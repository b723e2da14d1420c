//! Cell-based search space: backbone profiles, the supernet, and decoding.

mod decode;
mod network;
mod params;

pub use decode::{decode_architecture, Architecture, CellGenotype, Decoded, EdgeGene, OFF_LOGIT};
pub use network::{
    CellBits, CellUnit, ConvTrace, ConvUnit, EdgeOp, EdgeUnit, ForwardOptions, ForwardPass,
    LinearUnit, Network, Stem, TimestepMode,
};
pub use params::{Bound, Param, ParamGroup, ParamId, ParamStore};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::conv::out_dim;
use crate::error::{Result, SnasError};
use crate::scalar::Scalar;
use crate::spiking::NeuronParams;

/// Candidate operations on an edge, in α order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OpKind {
    Conv3x3,
    Skip,
}

impl OpKind {
    pub const ALL: [OpKind; 2] = [OpKind::Conv3x3, OpKind::Skip];

    pub fn index(self) -> usize {
        match self {
            OpKind::Conv3x3 => 0,
            OpKind::Skip => 1,
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OpKind::Conv3x3 => "conv3x3",
            OpKind::Skip => "skip",
        })
    }
}

impl FromStr for OpKind {
    type Err = SnasError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv3x3" => Ok(OpKind::Conv3x3),
            "skip" => Ok(OpKind::Skip),
            _ => Err(SnasError::Format(format!("unknown operation {s:?}"))),
        }
    }
}

/// Macro layout of a network: input geometry, cell count, where the
/// reduction cells sit (1-based), nodes per cell and class count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneProfile {
    pub name: String,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub init_channels: usize,
    pub cells: usize,
    pub reductions: Vec<usize>,
    pub nodes: usize,
    pub classes: usize,
}

impl BackboneProfile {
    pub fn cifar(init_channels: usize) -> Self {
        BackboneProfile {
            name: "cifar".into(),
            in_channels: 3,
            height: 32,
            width: 32,
            init_channels,
            cells: 8,
            reductions: vec![3, 6],
            nodes: 4,
            classes: 10,
        }
    }

    /// 40 MFCC bins × 98 frames.
    pub fn gsc(init_channels: usize) -> Self {
        BackboneProfile {
            name: "gsc".into(),
            in_channels: 1,
            height: 40,
            width: 98,
            init_channels,
            cells: 6,
            reductions: vec![3, 5],
            nodes: 4,
            classes: 12,
        }
    }

    pub fn desk() -> Self {
        BackboneProfile {
            name: "desk".into(),
            in_channels: 2,
            height: 8,
            width: 8,
            init_channels: 8,
            cells: 2,
            reductions: vec![2],
            nodes: 2,
            classes: 3,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "cifar" => Ok(Self::cifar(48)),
            "gsc" => Ok(Self::gsc(16)),
            "desk" => Ok(Self::desk()),
            _ => Err(SnasError::Config(format!(
                "unknown profile {name:?} (cifar, gsc, desk)"
            ))),
        }
    }

    pub fn is_reduction(&self, cell: usize) -> bool {
        self.reductions.contains(&cell)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("in_channels", self.in_channels),
            ("height", self.height),
            ("width", self.width),
            ("init_channels", self.init_channels),
            ("cells", self.cells),
            ("nodes", self.nodes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(SnasError::Config(format!(
                    "profile {name} must be positive"
                )));
            }
        }
        if self.classes < 2 {
            return Err(SnasError::Config(
                "profile needs at least two classes".into(),
            ));
        }
        if self.reductions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(SnasError::Config(format!(
                "reduction positions {:?} must be strictly increasing",
                self.reductions
            )));
        }
        if let Some(&bad) = self.reductions.iter().find(|&&r| r == 0 || r > self.cells) {
            return Err(SnasError::Config(format!(
                "reduction position {bad} outside cells 1..={}",
                self.cells
            )));
        }
        Ok(())
    }

    /// Feature shape after the stem and after every cell.
    pub fn shape_trace(&self) -> Result<Vec<LayerShape>> {
        self.validate()?;
        let (mut h, mut w, mut c) = (self.height, self.width, self.init_channels);
        let mut out = vec![LayerShape {
            cell: 0,
            reduction: false,
            node_channels: c,
            out_channels: c,
            height: h,
            width: w,
        }];
        for k in 1..=self.cells {
            let reduction = self.is_reduction(k);
            if reduction {
                c *= 2;
                h = out_dim(h, 3, 2, 1);
                w = out_dim(w, 3, 2, 1);
            }
            out.push(LayerShape {
                cell: k,
                reduction,
                node_channels: c,
                out_channels: c * self.nodes,
                height: h,
                width: w,
            });
        }
        Ok(out)
    }
}

/// Feature shape at one stage; `cell` 0 is the stem.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerShape {
    pub cell: usize,
    pub reduction: bool,
    /// Channels produced by each node (the stem's channels for cell 0).
    pub node_channels: usize,
    /// Channels after concatenating all nodes.
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeuronConfig {
    pub tau_decay: f64,
    pub v_th: f64,
    pub temperature: f64,
    pub window: f64,
}

impl Default for NeuronConfig {
    fn default() -> Self {
        let p = NeuronParams::<f64>::default();
        NeuronConfig {
            tau_decay: p.tau_decay,
            v_th: p.v_th,
            temperature: p.temperature,
            window: p.window,
        }
    }
}

impl NeuronConfig {
    pub fn params<T: Scalar>(&self) -> NeuronParams<T> {
        NeuronParams {
            tau_decay: T::lit(self.tau_decay),
            v_th: T::lit(self.v_th),
            temperature: T::lit(self.temperature),
            window: T::lit(self.window),
        }
    }
}

/// Everything about the search space that is not macro layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSpace {
    /// Candidate bit-widths B.
    pub bits: Vec<u32>,
    pub t_max: usize,
    /// Pruning rate p in percent.
    pub pruning_rate: f64,
    /// One α per cell type instead of one per cell.
    pub share_alpha: bool,
    /// Precision of the stem and classifier (32 = full precision).
    pub io_bits: u32,
    pub neuron: NeuronConfig,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            bits: vec![1, 2, 4],
            t_max: 4,
            pruning_rate: 50.0,
            share_alpha: true,
            io_bits: 32,
            neuron: NeuronConfig::default(),
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        if self.bits.is_empty() || self.bits.iter().any(|&b| b == 0 || b > 32) {
            return Err(SnasError::Config(format!(
                "bit-width candidates {:?} must lie in 1..=32",
                self.bits
            )));
        }
        if self.t_max == 0 {
            return Err(SnasError::Config("t_max must be positive".into()));
        }
        if self.io_bits == 0 || self.io_bits > 32 {
            return Err(SnasError::Config("io_bits must lie in 1..=32".into()));
        }
        crate::compression::keep_count(1, self.pruning_rate)
            .map_err(|e| SnasError::Config(e.to_string()))?;
        self.neuron.params::<f64>().validate()
    }
}
