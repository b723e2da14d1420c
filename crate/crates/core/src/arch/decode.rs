use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use super::network::{CellBits, EdgeOp, Network, TimestepMode};
use super::{BackboneProfile, OpKind, SearchSpace};
use crate::error::{Result, SnasError};
use crate::objectives::argmax;
use crate::scalar::Scalar;

/// Logit that makes a softmax entry exactly zero next to a zero logit.
/// Logit used to switch a choice off when pinning an architecture.
pub const OFF_LOGIT: f64 = -1e4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EdgeGene {
    pub from: usize,
    pub node: usize,
    pub op: OpKind,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CellGenotype {
    pub reduction: bool,
    pub bits: u32,
    pub edges: Vec<EdgeGene>,
}

/// Discrete outcome of a search: two incoming edges per node, one
/// operation per edge, a bit-width per cell and a timestep count.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub timesteps: usize,
    pub cells: Vec<CellGenotype>,
}

/// Architecture plus the pruning masks of every surviving convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub arch: Architecture,
    pub masks: BTreeMap<String, Vec<bool>>,
}

impl Architecture {
    pub fn check_against(&self, profile: &BackboneProfile, space: &SearchSpace) -> Result<()> {
        let bad = |msg: String| {
            Err(SnasError::Config(format!(
                "architecture does not fit profile: {msg}"
            )))
        };
        if self.timesteps == 0 || self.timesteps > space.t_max {
            return bad(format!(
                "timesteps {} outside 1..={}",
                self.timesteps, space.t_max
            ));
        }
        if self.cells.len() != profile.cells {
            return bad(format!(
                "{} cells, profile has {}",
                self.cells.len(),
                profile.cells
            ));
        }
        for (i, c) in self.cells.iter().enumerate() {
            let k = i + 1;
            if c.reduction != profile.is_reduction(k) {
                return bad(format!("cell {k} reduction flag"));
            }
            if !space.bits.contains(&c.bits) {
                return bad(format!(
                    "cell {k} bit-width {} not in {:?}",
                    c.bits, space.bits
                ));
            }
            for node in 0..profile.nodes {
                let mut from: Vec<usize> = c
                    .edges
                    .iter()
                    .filter(|e| e.node == node)
                    .map(|e| e.from)
                    .collect();
                from.sort_unstable();
                from.dedup();
                let count = c.edges.iter().filter(|e| e.node == node).count();
                if count != 2 || from.len() != 2 || from[1] >= node + 2 {
                    return bad(format!(
                        "cell {k} node {node} needs two distinct earlier inputs"
                    ));
                }
            }
            if let Some(e) = c.edges.iter().find(|e| e.node >= profile.nodes) {
                return bad(format!("cell {k} edge into node {}", e.node));
            }
        }
        Ok(())
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "timesteps {}", self.timesteps)?;
        for (i, c) in self.cells.iter().enumerate() {
            let kind = if c.reduction { "reduction" } else { "normal" };
            writeln!(f, "cell {} {kind} bits {}", i + 1, c.bits)?;
            for e in &c.edges {
                writeln!(f, "  edge {} -> {} {}", e.from, e.node, e.op)?;
            }
        }
        Ok(())
    }
}

impl FromStr for Architecture {
    type Err = SnasError;

    fn from_str(text: &str) -> Result<Self> {
        let err =
            |line: usize, msg: &str| SnasError::Format(format!("architecture line {line}: {msg}"));
        let mut timesteps = None;
        let mut cells: Vec<CellGenotype> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let n = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let words: Vec<&str> = line.split_whitespace().collect();
            let num = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| err(n, &format!("expected a number, got {s:?}")))
            };
            match words.as_slice() {
                ["timesteps", t] => timesteps = Some(num(t)?),
                ["cell", k, kind, "bits", b] => {
                    if num(k)? != cells.len() + 1 {
                        return Err(err(n, "cells must be numbered 1, 2, ... in order"));
                    }
                    let reduction = match *kind {
                        "normal" => false,
                        "reduction" => true,
                        _ => return Err(err(n, "cell kind must be normal or reduction")),
                    };
                    let bits = b.parse().map_err(|_| err(n, "bad bit-width"))?;
                    cells.push(CellGenotype {
                        reduction,
                        bits,
                        edges: Vec::new(),
                    });
                }
                ["edge", from, "->", node, op] => {
                    let cell = cells
                        .last_mut()
                        .ok_or_else(|| err(n, "edge before any cell"))?;
                    cell.edges.push(EdgeGene {
                        from: num(from)?,
                        node: num(node)?,
                        op: op
                            .parse()
                            .map_err(|_| err(n, &format!("unknown operation {op:?}")))?,
                    });
                }
                _ => return Err(err(n, &format!("unrecognised line {line:?}"))),
            }
        }
        Ok(Architecture {
            timesteps: timesteps
                .ok_or_else(|| SnasError::Format("architecture lacks a timesteps line".into()))?,
            cells,
        })
    }
}

/// Keeps the two strongest incoming edges per node (strength = largest
/// α logit on the edge), the argmax operation per kept edge, the argmax
/// bit-width per cell and the argmax timestep count. Ties go to the lowest
/// index.
pub fn decode_architecture<T: Scalar>(net: &Network<T>) -> Result<Decoded> {
    let mut cells = Vec::with_capacity(net.cells.len());
    let mut masks = BTreeMap::new();
    for cell in &net.cells {
        let alpha = cell.alpha.map(|id| net.params.value(id));
        let mut genes = Vec::new();
        for node in 0..net.profile.nodes {
            let mut ranked: Vec<(f64, usize, OpKind)> = Vec::new();
            for e in cell.edges.iter().filter(|e| e.node == node && e.enabled) {
                let (strength, op) = match (e.op, alpha) {
                    (EdgeOp::Fixed(op), _) => (1.0, op),
                    (EdgeOp::Mixed, Some(a)) => {
                        let width = OpKind::ALL.len();
                        let row: Vec<f64> = a.data()[e.row * width..(e.row + 1) * width]
                            .iter()
                            .map(|v| v.as_f64())
                            .collect();
                        let best = argmax(&row);
                        (row[best], OpKind::ALL[best])
                    }
                    (EdgeOp::Mixed, None) => {
                        return Err(SnasError::invalid(format!(
                            "cell {} has mixed edges but no α",
                            cell.index
                        )))
                    }
                };
                ranked.push((strength, e.from, op));
            }
            // stable sort keeps lower source index first among equals
            ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
            let mut kept: Vec<EdgeGene> = ranked
                .iter()
                .take(2)
                .map(|&(_, from, op)| EdgeGene { from, node, op })
                .collect();
            kept.sort_by_key(|e| e.from);
            genes.extend(kept);
        }
        let bits = match cell.bits {
            CellBits::Fixed(k) => k,
            CellBits::Searched(id) => net.space.bits[argmax(net.params.value(id).data())],
        };
        for unit in [&cell.pre_a, &cell.pre_b] {
            masks.insert(unit.name.clone(), net.mask(unit)?);
        }
        for g in genes.iter().filter(|g| g.op == OpKind::Conv3x3) {
            let edge = cell
                .edges
                .iter()
                .find(|e| e.node == g.node && e.from == g.from)
                .and_then(|e| e.conv.as_ref())
                .ok_or_else(|| SnasError::invalid("kept conv edge has no convolution"))?;
            masks.insert(edge.name.clone(), net.mask(edge)?);
        }
        cells.push(CellGenotype {
            reduction: cell.reduction,
            bits,
            edges: genes,
        });
    }
    let timesteps = match net.timesteps {
        TimestepMode::Fixed(t) => t,
        TimestepMode::Searched(id) => argmax(net.params.value(id).data()) + 1,
    };
    Ok(Decoded {
        arch: Architecture { timesteps, cells },
        masks,
    })
}

impl<T: Scalar> Network<T> {
    /// Sets α, β and ψ to exact one-hot values at `arch`'s choices and
    /// disables every edge it drops. Cells sharing α must agree.
    pub fn pin_to(&mut self, arch: &Architecture) -> Result<()> {
        arch.check_against(&self.profile, &self.space)?;
        let off = T::lit(OFF_LOGIT);
        let width = OpKind::ALL.len();
        let mut pinned: BTreeMap<usize, Vec<T>> = BTreeMap::new();
        for (cell, genes) in self.cells.iter_mut().zip(&arch.cells) {
            for e in &mut cell.edges {
                e.enabled = genes
                    .edges
                    .iter()
                    .any(|g| g.node == e.node && g.from == e.from);
            }
            if let Some(id) = cell.alpha {
                let mut logits = vec![T::zero(); self.params.value(id).len()];
                for e in &cell.edges {
                    let op = genes
                        .edges
                        .iter()
                        .find(|g| g.node == e.node && g.from == e.from)
                        .map(|g| g.op);
                    if let Some(op) = op {
                        for (j, cand) in OpKind::ALL.iter().enumerate() {
                            logits[e.row * width + j] = if *cand == op { T::zero() } else { off };
                        }
                    }
                }
                if let Some(prev) = pinned.get(&id.0) {
                    if *prev != logits {
                        return Err(SnasError::invalid(
                            "cells sharing α decode to different edges",
                        ));
                    }
                }
                pinned.insert(id.0, logits.clone());
                self.params
                    .value_mut(id)
                    .data_mut()
                    .copy_from_slice(&logits);
            }
            match cell.bits {
                CellBits::Searched(id) => {
                    let pos = self
                        .space
                        .bits
                        .iter()
                        .position(|&b| b == genes.bits)
                        .unwrap_or(0);
                    let v = self.params.value_mut(id).data_mut();
                    v.iter_mut()
                        .enumerate()
                        .for_each(|(j, x)| *x = if j == pos { T::zero() } else { off });
                }
                CellBits::Fixed(k) if k != genes.bits => {
                    return Err(SnasError::invalid(format!(
                        "cell {} is fixed at {k} bits",
                        cell.index
                    )));
                }
                CellBits::Fixed(_) => {}
            }
        }
        if let TimestepMode::Searched(id) = self.timesteps {
            let v = self.params.value_mut(id).data_mut();
            v.iter_mut().enumerate().for_each(|(j, x)| {
                *x = if j + 1 == arch.timesteps {
                    T::zero()
                } else {
                    off
                }
            });
        }
        Ok(())
    }
}
