//! Leaky integrate-and-fire dynamics, the Dspike surrogate gradient and
//! temporal unrolling.

use std::rc::Rc;

use crate::autograd::{BackwardRule, Graph, Var};
use crate::error::{Result, SnasError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NeuronParams<T> {
    /// Membrane decay factor, `0 <= tau_decay < 1`.
    pub tau_decay: T,
    pub v_th: T,
    /// Dspike temperature.
    pub temperature: T,
    /// Half-width of the surrogate window around `v_th`.
    pub window: T,
}

impl<T: Scalar> Default for NeuronParams<T> {
    fn default() -> Self {
        NeuronParams {
            tau_decay: T::lit(0.2),
            v_th: T::lit(0.5),
            temperature: T::lit(3.0),
            window: T::lit(0.5),
        }
    }
}

impl<T: Scalar> NeuronParams<T> {
    pub fn validate(&self) -> Result<()> {
        let ok = self.tau_decay >= T::zero()
            && self.tau_decay < T::one()
            && self.v_th > T::zero()
            && self.temperature > T::zero()
            && self.window > T::zero();
        if ok {
            Ok(())
        } else {
            Err(SnasError::invalid(format!(
                "neuron parameters out of range: {self:?}"
            )))
        }
    }
}

/// Membrane potential and last emitted spikes of a population.
#[derive(Clone, Debug, PartialEq)]
pub struct LifState<T> {
    pub u: Tensor<T>,
    pub y_prev: Tensor<T>,
}

impl<T: Scalar> LifState<T> {
    pub fn resting(shape: &[usize]) -> Self {
        LifState {
            u: Tensor::zeros(shape),
            y_prev: Tensor::zeros(shape),
        }
    }
}

/// One Euler step: `u = tau * u * (1 - y_prev) + I`, spike where `u >= v_th`.
pub fn lif_step<T: Scalar>(
    state: &LifState<T>,
    input: &Tensor<T>,
    params: &NeuronParams<T>,
) -> Result<(LifState<T>, Tensor<T>)> {
    if state.u.shape() != input.shape() || state.y_prev.shape() != input.shape() {
        return Err(SnasError::shape(
            "lif_step",
            format!("state {:?} vs input {:?}", state.u.shape(), input.shape()),
        ));
    }
    let u: Vec<T> = state
        .u
        .data()
        .iter()
        .zip(state.y_prev.data())
        .zip(input.data())
        .map(|((&u, &y), &i)| params.tau_decay * u * (T::one() - y) + i)
        .collect();
    let spikes: Vec<T> = u
        .iter()
        .map(|&v| {
            if v >= params.v_th {
                T::one()
            } else {
                T::zero()
            }
        })
        .collect();
    let shape = input.shape().to_vec();
    let spikes = Tensor::from_parts(shape.clone(), spikes);
    Ok((
        LifState {
            u: Tensor::from_parts(shape, u),
            y_prev: spikes.clone(),
        },
        spikes,
    ))
}

/// Dspike derivative at membrane offset `d = u - v_th`:
/// `b (1 - tanh²(b d)) / (2 tanh(b/2))` inside the window, 0 outside.
#[inline]
pub fn dspike<T: Scalar>(d: T, temperature: T, window: T) -> T {
    if d.abs() > window {
        return T::zero();
    }
    let th = (temperature * d).tanh();
    temperature * (T::one() - th * th) / (T::two() * (temperature / T::two()).tanh())
}

pub fn dspike_surrogate_factor<T: Scalar>(u: &Tensor<T>, params: &NeuronParams<T>) -> Tensor<T> {
    u.map(|v| dspike(v - params.v_th, params.temperature, params.window))
}

fn dspike_rule<T: Scalar>(params: NeuronParams<T>) -> BackwardRule<T> {
    Rc::new(move |ctx| {
        let g = ctx.inputs[0]
            .data()
            .iter()
            .zip(ctx.grad_output)
            .map(|(&u, &g)| g * dspike(u - params.v_th, params.temperature, params.window))
            .collect();
        vec![Some(g)]
    })
}

/// Threshold comparison whose backward pass uses the Dspike surrogate.
pub fn spike<T: Scalar>(g: &mut Graph<T>, u: Var, params: &NeuronParams<T>) -> Result<Var> {
    let s = g.heaviside(u, params.v_th);
    g.register_custom_gradient(s, dspike_rule(*params))?;
    Ok(s)
}

/// Runs a LIF population over a sequence of input currents, starting from
/// rest. The reset gate `(1 - y_prev)` is treated as a constant in backward.
pub fn lif_sequence<T: Scalar>(
    g: &mut Graph<T>,
    currents: &[Var],
    params: &NeuronParams<T>,
) -> Result<Vec<Var>> {
    let mut spikes = Vec::with_capacity(currents.len());
    let mut prev: Option<(Var, Var)> = None;
    for &i in currents {
        let u = match prev {
            None => i,
            Some((u_prev, y_prev)) => {
                if g.shape(u_prev) != g.shape(i) {
                    return Err(SnasError::shape(
                        "lif_sequence",
                        format!("{:?} vs {:?}", g.shape(u_prev), g.shape(i)),
                    ));
                }
                let keep: Vec<T> = g
                    .data(y_prev)
                    .iter()
                    .map(|&y| params.tau_decay * (T::one() - y))
                    .collect();
                let carry = g.mul_const(u_prev, keep)?;
                g.add(carry, i)?
            }
        };
        let s = spike(g, u, params)?;
        spikes.push(s);
        prev = Some((u, s));
    }
    Ok(spikes)
}

/// Per-layer spike counts over one forward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SpikeStats {
    pub layers: Vec<LayerSpikes>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpikes {
    pub name: String,
    /// Neurons per sample.
    pub neurons: usize,
    pub batch: usize,
    /// Spike count at each timestep, summed over the batch.
    pub counts: Vec<u64>,
}

impl LayerSpikes {
    /// Average spike rate per neuron at each timestep.
    pub fn rates(&self) -> Vec<f64> {
        let denom = (self.neurons * self.batch) as f64;
        self.counts.iter().map(|&c| c as f64 / denom).collect()
    }
}

impl SpikeStats {
    /// Records the binary spike tensor `[batch, ...]` emitted by `name` at the
    /// next timestep of that layer.
    pub fn record<T: Scalar>(&mut self, name: &str, spikes: &Tensor<T>) {
        let batch = spikes.shape()[0];
        let neurons = spikes.len() / batch;
        let count = spikes.data().iter().filter(|&&v| v != T::zero()).count() as u64;
        match self.layers.iter_mut().find(|l| l.name == name) {
            Some(l) => l.counts.push(count),
            None => self.layers.push(LayerSpikes {
                name: name.to_string(),
                neurons,
                batch,
                counts: vec![count],
            }),
        }
    }

    pub fn layer(&self, name: &str) -> Option<&LayerSpikes> {
        self.layers.iter().find(|l| l.name == name)
    }
}

/// A network that can be unrolled over time inside a graph.
pub trait TemporalNetwork<T: Scalar> {
    /// Consumes one input var per timestep and returns one logit var per
    /// timestep. Implementations start every neuron from rest.
    fn forward_sequence(
        &self,
        g: &mut Graph<T>,
        inputs: &[Var],
        stats: &mut SpikeStats,
    ) -> Result<Vec<Var>>;
}

/// Unrolls `net` for `steps` timesteps on `inputs` (one tensor per timestep,
/// or a single tensor repeated when only one is supplied).
pub fn run_temporal<T: Scalar, N: TemporalNetwork<T>>(
    net: &N,
    inputs: &[Tensor<T>],
    steps: usize,
) -> Result<(Vec<Tensor<T>>, SpikeStats)> {
    if steps == 0 {
        return Err(SnasError::invalid(
            "run_temporal needs at least one timestep",
        ));
    }
    if inputs.is_empty() || (inputs.len() != 1 && inputs.len() < steps) {
        return Err(SnasError::invalid(format!(
            "{} input frames for {steps} timesteps",
            inputs.len()
        )));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = (0..steps)
        .map(|t| g.constant(inputs[if inputs.len() == 1 { 0 } else { t }].clone()))
        .collect();
    let mut stats = SpikeStats::default();
    let outs = net.forward_sequence(&mut g, &vars, &mut stats)?;
    Ok((outs.iter().map(|&v| g.value(v).clone()).collect(), stats))
}

/// Fully-connected spiking stack: every hidden layer is `linear -> LIF`, the
/// last layer is a non-spiking linear readout.
#[derive(Clone, Debug)]
pub struct SpikingMlp<T> {
    /// `(weight [out, in], bias [out])` per layer.
    pub layers: Vec<(Tensor<T>, Tensor<T>)>,
    pub params: NeuronParams<T>,
}

impl<T: Scalar> TemporalNetwork<T> for SpikingMlp<T> {
    fn forward_sequence(
        &self,
        g: &mut Graph<T>,
        inputs: &[Var],
        stats: &mut SpikeStats,
    ) -> Result<Vec<Var>> {
        let (readout, hidden) = self
            .layers
            .split_last()
            .ok_or_else(|| SnasError::invalid("empty network"))?;
        let mut seq = inputs.to_vec();
        for (li, (w, b)) in hidden.iter().enumerate() {
            let (wv, bv) = (g.param(w.clone()), g.param(b.clone()));
            let currents = seq
                .iter()
                .map(|&x| g.linear(x, wv, bv))
                .collect::<Result<Vec<_>>>()?;
            seq = lif_sequence(g, &currents, &self.params)?;
            let name = format!("hidden{li}");
            for &s in &seq {
                stats.record(&name, g.value(s));
            }
        }
        let (wv, bv) = (g.param(readout.0.clone()), g.param(readout.1.clone()));
        seq.iter().map(|&x| g.linear(x, wv, bv)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_state(u: f64, y: f64) -> LifState<f64> {
        LifState {
            u: Tensor::scalar(u),
            y_prev: Tensor::scalar(y),
        }
    }

    #[test]
    fn hand_evaluated_trace() {
        let p = NeuronParams::default();
        let s0 = scalar_state(0.0, 0.0);
        let (s1, y1) = lif_step(&s0, &Tensor::scalar(0.6), &p).unwrap();
        assert_abs_diff_eq!(s1.u.item(), 0.6);
        assert_eq!(y1.item(), 1.0);
        let (s2, y2) = lif_step(&s1, &Tensor::scalar(0.3), &p).unwrap();
        assert_abs_diff_eq!(s2.u.item(), 0.3);
        assert_eq!(y2.item(), 0.0);
        let (s3, y3) = lif_step(&s2, &Tensor::scalar(0.25), &p).unwrap();
        assert_abs_diff_eq!(s3.u.item(), 0.31, epsilon = 1e-15);
        assert_eq!(y3.item(), 0.0);
    }

    #[test]
    fn boundary_fires_and_shapes_checked() {
        let p = NeuronParams::<f64>::default();
        let (_, y) = lif_step(&scalar_state(0.0, 0.0), &Tensor::scalar(0.5), &p).unwrap();
        assert_eq!(y.item(), 1.0);
        let bad = lif_step(&scalar_state(0.0, 0.0), &Tensor::zeros(&[2]), &p);
        assert!(bad.is_err());
    }

    #[test]
    fn params_validation() {
        let mut p = NeuronParams::<f64>::default();
        assert!(p.validate().is_ok());
        p.tau_decay = 1.0;
        assert!(p.validate().is_err());
        p.tau_decay = 0.2;
        p.v_th = 0.0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn dspike_closed_form() {
        let p = NeuronParams::<f64>::default();
        let peak = dspike_surrogate_factor(&Tensor::scalar(0.5), &p).item();
        assert_abs_diff_eq!(peak, 3.0 / (2.0 * 1.5f64.tanh()), epsilon = 1e-15);
        assert!((peak - 1.6572).abs() < 1e-4);
        assert_eq!(dspike(1.5, 3.0, 0.5), 0.0);
        assert_eq!(dspike(-1.5, 3.0, 0.5), 0.0);
        for d in [0.01, 0.1, 0.3, 0.49] {
            assert_eq!(dspike(d, 3.0, 0.5), dspike(-d, 3.0, 0.5));
            assert!(dspike(d, 3.0, 0.5) < peak);
        }
    }

    #[test]
    fn dspike_integrates_to_one() {
        // midpoint rule over the window
        let n = 200_000;
        let (a, b) = (-0.5, 0.5);
        let h = (b - a) / n as f64;
        let integral: f64 = (0..n)
            .map(|i| dspike(a + (i as f64 + 0.5) * h, 3.0, 0.5) * h)
            .sum();
        assert!((integral - 1.0).abs() < 0.02, "{integral}");
    }

    #[test]
    fn graph_spike_uses_dspike_backward() {
        let p = NeuronParams::<f64>::default();
        let mut g = Graph::new();
        let u = g.param(Tensor::from_vec(vec![0.5, 0.7, 0.1, 2.0]));
        let s = spike(&mut g, u, &p).unwrap();
        assert_eq!(g.data(s), &[1.0, 1.0, 0.0, 1.0]);
        let total = g.sum(s);
        g.backward(total).unwrap();
        let expect = dspike_surrogate_factor(g.value(u), &p);
        assert_eq!(g.grad(u).unwrap(), expect.data());
    }

    #[test]
    fn memoryless_without_decay() {
        let p = NeuronParams {
            tau_decay: 0.0,
            ..NeuronParams::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut st = LifState::resting(&[8]);
        for _ in 0..5 {
            let i =
                Tensor::new(vec![8], (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let (next, _) = lif_step(&st, &i, &p).unwrap();
            assert_eq!(next.u.data(), i.data());
            st = next;
        }
    }

    #[test]
    fn run_temporal_rejects_zero_steps() {
        let net = SpikingMlp::<f64> {
            layers: vec![(Tensor::zeros(&[1, 1]), Tensor::zeros(&[1]))],
            params: NeuronParams::default(),
        };
        assert!(run_temporal(&net, &[Tensor::zeros(&[1, 1])], 0).is_err());
    }

    #[test]
    fn identity_synapses_zero_input_stay_silent() {
        let eye = |n: usize| {
            let mut t = Tensor::zeros(&[n, n]);
            for i in 0..n {
                t.data_mut()[i * n + i] = 1.0;
            }
            t
        };
        let net = SpikingMlp::<f64> {
            layers: vec![(eye(3), Tensor::zeros(&[3])), (eye(3), Tensor::zeros(&[3]))],
            params: NeuronParams::default(),
        };
        let (outs, stats) = run_temporal(&net, &[Tensor::zeros(&[2, 3])], 4).unwrap();
        assert!(outs.iter().all(|o| o.data().iter().all(|&v| v == 0.0)));
        assert!(stats.layers[0].rates().iter().all(|&r| r == 0.0));
    }

    #[test]
    fn driven_neuron_fires_every_step() {
        let net = SpikingMlp::<f64> {
            layers: vec![
                (Tensor::full(&[1, 1], 1.0), Tensor::zeros(&[1])),
                (Tensor::full(&[1, 1], 1.0), Tensor::zeros(&[1])),
            ],
            params: NeuronParams::default(),
        };
        let (_, stats) = run_temporal(&net, &[Tensor::full(&[1, 1], 0.9)], 6).unwrap();
        assert_eq!(stats.layers[0].rates(), vec![1.0; 6]);
    }

    #[test]
    fn rates_match_independent_event_counter() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut rand_t = |shape: &[usize], scale: f64| {
            let n = shape.iter().product();
            Tensor::new(
                shape.to_vec(),
                (0..n).map(|_| rng.gen_range(-scale..scale)).collect(),
            )
            .unwrap()
        };
        let (w1, b1, w2, b2) = (
            rand_t(&[6, 4], 1.0),
            rand_t(&[6], 0.3),
            rand_t(&[5, 6], 1.0),
            rand_t(&[5], 0.3),
        );
        let w3 = rand_t(&[2, 5], 1.0);
        let inputs: Vec<Tensor<f64>> = (0..4).map(|_| rand_t(&[3, 4], 1.5)).collect();
        let p = NeuronParams::default();
        let net = SpikingMlp {
            layers: vec![
                (w1.clone(), b1.clone()),
                (w2.clone(), b2.clone()),
                (w3, Tensor::zeros(&[2])),
            ],
            params: p,
        };
        let (_, stats) = run_temporal(&net, &inputs, 4).unwrap();

        // Independent walk: explicit loops per neuron, per sample, per step.
        let mut counts = [[0u64; 4]; 2];
        for b in 0..3 {
            let mut u1 = [0.0; 6];
            let mut y1 = [0.0; 6];
            let mut u2 = [0.0; 5];
            let mut y2 = [0.0; 5];
            for t in 0..4 {
                let x = &inputs[t].data()[b * 4..(b + 1) * 4];
                for i in 0..6 {
                    let cur: f64 =
                        b1.data()[i] + (0..4).map(|j| w1.data()[i * 4 + j] * x[j]).sum::<f64>();
                    u1[i] = 0.2 * u1[i] * (1.0 - y1[i]) + cur;
                }
                for i in 0..6 {
                    y1[i] = if u1[i] >= 0.5 { 1.0 } else { 0.0 };
                    counts[0][t] += y1[i] as u64;
                }
                for i in 0..5 {
                    let cur: f64 =
                        b2.data()[i] + (0..6).map(|j| w2.data()[i * 6 + j] * y1[j]).sum::<f64>();
                    u2[i] = 0.2 * u2[i] * (1.0 - y2[i]) + cur;
                }
                for i in 0..5 {
                    y2[i] = if u2[i] >= 0.5 { 1.0 } else { 0.0 };
                    counts[1][t] += y2[i] as u64;
                }
            }
        }
        assert_eq!(stats.layers[0].counts, counts[0].to_vec());
        assert_eq!(stats.layers[1].counts, counts[1].to_vec());
        let r = stats.layers[0].rates();
        assert_eq!(r[0], counts[0][0] as f64 / 18.0);
    }

    proptest! {
        #[test]
        fn spikes_binary_and_reset_multiplicative(
            u in -2.0f64..2.0, i in -2.0f64..2.0, fired in proptest::bool::ANY
        ) {
            let p = NeuronParams::default();
            let y = if fired { 1.0 } else { 0.0 };
            let (next, s) = lif_step(&scalar_state(u, y), &Tensor::scalar(i), &p).unwrap();
            prop_assert!(s.is_binary());
            if fired {
                prop_assert_eq!(next.u.item(), i);
            }
        }
    }
}
