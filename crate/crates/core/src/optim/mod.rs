//! Parameter-group optimizers: heavy-ball momentum for weights, bias-corrected
//! adaptive moments for architecture parameters, cosine learning-rate decay.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::arch::{ParamGroup, ParamStore};
use crate::error::{Result, SnasError};
use crate::scalar::Scalar;

/// `buffer ← momentum·buffer + grad; param ← param − lr·buffer`.
pub fn momentum_update<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    buffer: &mut [T],
    lr: T,
    momentum: T,
) {
    for ((p, &g), b) in param.iter_mut().zip(grad).zip(buffer.iter_mut()) {
        *b = momentum * *b + g;
        *p -= lr * *b;
    }
}

/// One bias-corrected adaptive-moment step; `t` is the 1-based step count.
#[allow(clippy::too_many_arguments)]
pub fn adaptive_update<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    lr: T,
    betas: (T, T),
    eps: T,
    t: u64,
) {
    let (b1, b2) = betas;
    let c1 = T::one() - b1.powi(t as i32);
    let c2 = T::one() - b2.powi(t as i32);
    for (((p, &g), mi), vi) in param
        .iter_mut()
        .zip(grad)
        .zip(m.iter_mut())
        .zip(v.iter_mut())
    {
        *mi = b1 * *mi + (T::one() - b1) * g;
        *vi = b2 * *vi + (T::one() - b2) * g * g;
        let m_hat = *mi / c1;
        let v_hat = *vi / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// `base · (1 + cos(π·step/total)) / 2`, reaching 0 at `step = total`.
pub fn cosine_lr(base: f64, step: u64, total: u64) -> f64 {
    if total == 0 {
        return base;
    }
    let frac = (step.min(total) as f64) / total as f64;
    base * 0.5 * (1.0 + (PI * frac).cos())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub weight_lr: f64,
    pub momentum: f64,
    pub arch_lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            weight_lr: 0.025,
            momentum: 0.9,
            arch_lr: 3e-4,
            betas: (0.9, 0.999),
            eps: 1e-8,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.weight_lr > 0.0
            && self.arch_lr > 0.0
            && (0.0..1.0).contains(&self.momentum)
            && (0.0..1.0).contains(&self.betas.0)
            && (0.0..1.0).contains(&self.betas.1)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(SnasError::Config(format!(
                "invalid optimizer settings {self:?}"
            )))
        }
    }
}

/// Optimizer buffers keyed by parameter name, plus step counters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimState<T> {
    pub momentum: BTreeMap<String, Vec<T>>,
    pub first_moment: BTreeMap<String, Vec<T>>,
    pub second_moment: BTreeMap<String, Vec<T>>,
    /// Adaptive steps taken so far.
    pub arch_steps: u64,
    pub iteration: u64,
    pub epoch: u64,
}

impl<T: Scalar> OptimState<T> {
    pub fn new() -> Self {
        OptimState {
            momentum: BTreeMap::new(),
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
            arch_steps: 0,
            iteration: 0,
            epoch: 0,
        }
    }

    /// Momentum step on every weight-group parameter that received a
    /// gradient. Returns how many tensors moved.
    pub fn step_weights(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &[Option<Vec<T>>],
        lr: f64,
        momentum: f64,
    ) -> usize {
        let mut n = 0;
        for id in store.ids(ParamGroup::Weights) {
            let Some(g) = &grads[id.0] else { continue };
            let name = store.get(id).name.clone();
            let p = store.value_mut(id).data_mut();
            let buf = self
                .momentum
                .entry(name)
                .or_insert_with(|| vec![T::zero(); p.len()]);
            momentum_update(p, g, buf, T::lit(lr), T::lit(momentum));
            n += 1;
        }
        n
    }

    /// Adaptive step on the arch-group parameters accepted by `train`.
    pub fn step_arch(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &[Option<Vec<T>>],
        cfg: &OptimConfig,
        train: &dyn Fn(&str) -> bool,
    ) -> usize {
        self.arch_steps += 1;
        let t = self.arch_steps;
        let mut n = 0;
        for id in store.ids(ParamGroup::Arch) {
            let Some(g) = &grads[id.0] else { continue };
            let name = store.get(id).name.clone();
            if !train(&name) {
                continue;
            }
            let p = store.value_mut(id).data_mut();
            let m = self
                .first_moment
                .entry(name.clone())
                .or_insert_with(|| vec![T::zero(); p.len()]);
            let v = self
                .second_moment
                .entry(name)
                .or_insert_with(|| vec![T::zero(); p.len()]);
            adaptive_update(
                p,
                g,
                m,
                v,
                T::lit(cfg.arch_lr),
                (T::lit(cfg.betas.0), T::lit(cfg.betas.1)),
                T::lit(cfg.eps),
                t,
            );
            n += 1;
        }
        n
    }
}
