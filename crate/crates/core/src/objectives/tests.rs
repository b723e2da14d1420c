use approx::assert_abs_diff_eq;
use proptest::prelude::*;

use super::*;
use crate::autograd::finite_diff_check;

fn layer(
    kh: usize,
    c_in: usize,
    c_out: usize,
    h: usize,
    p: f64,
    rates: Vec<f64>,
) -> LayerCostDescriptor {
    LayerCostDescriptor {
        name: "l".into(),
        kh,
        kw: kh,
        c_in,
        c_out,
        h,
        w: h,
        pruning_rate: p,
        rates,
    }
}

#[test]
fn worked_timestep_example() {
    let s = [0.11, 0.23, 0.05, 0.4, 0.31, 0.17];
    let w = [0.0, 0.0, 0.0, 0.0, 0.6, 0.4];
    let got = weighted_spike_rate_probs(&s, &w).unwrap();
    let expect = s[..5].iter().sum::<f64>() + 0.4 * s[5];
    assert!((got - expect).abs() < 1e-12);
    let all = weighted_spike_rate_probs(&s, &[0.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
    assert_eq!(all, s.iter().fold(0.0, |a, b| a + b));
    assert_eq!(
        weighted_spike_rate(&[0.0; 4], &[0.3, 0.1, 2.0, -1.0]).unwrap(),
        0.0
    );
    assert!(weighted_spike_rate(&[0.0; 3], &[0.0; 4]).is_err());
}

#[test]
fn synops_examples() {
    let l = layer(3, 1, 2, 4, 0.0, vec![]);
    assert_eq!(synops(&l, 0.5), 144.0);
    let half = layer(3, 1, 2, 4, 50.0, vec![]);
    assert_eq!(synops(&half, 0.5), 72.0);
}

#[test]
fn effective_bitwidth_examples() {
    assert_abs_diff_eq!(
        effective_bitwidth(&[0.0, 0.0, 0.0], &[1, 2, 4]).unwrap(),
        7.0 / 3.0,
        epsilon = 1e-15
    );
    assert_eq!(
        effective_bitwidth(&[-1e4, -1e4, 0.0], &[1, 2, 4]).unwrap(),
        4.0
    );
    assert!(effective_bitwidth(&[0.0], &[1, 2]).is_err());
    let beta = Tensor::from_vec(vec![0.3, -0.2, 0.9]);
    let err =
        finite_diff_check(|g, b| effective_bitwidth_var(g, b, &[1, 2, 4]), &beta, 1e-6).unwrap();
    assert!(err <= 1e-6, "{err}");
}

#[test]
fn loss_mem_examples() {
    let t = |c_out, bw, p| CostTerm {
        layer: layer(3, 4, c_out, 8, p, vec![]),
        bitwidth: bw,
        op_weight: 1.0,
    };
    assert_eq!(loss_mem(&[t(8, 2.0, 50.0)]), 288.0);
    assert_eq!(loss_mem(&[t(8, 32.0, 0.0)]), 32.0 * 288.0);
    assert_eq!(loss_mem(&[t(16, 2.0, 50.0)]), 2.0 * 288.0);
}

#[test]
fn loss_comp_examples() {
    let l = layer(3, 1, 2, 4, 0.0, vec![0.5]);
    let term = |bw| CostTerm {
        layer: l.clone(),
        bitwidth: bw,
        op_weight: 1.0,
    };
    assert_eq!(loss_comp(&[term(1.0)], &[1.0]).unwrap(), 144.0);
    assert_eq!(loss_comp(&[term(4.0)], &[1.0]).unwrap(), 576.0);
    let silent = CostTerm {
        layer: layer(3, 1, 2, 4, 0.0, vec![0.0]),
        bitwidth: 4.0,
        op_weight: 1.0,
    };
    assert_eq!(loss_comp(&[silent], &[1.0]).unwrap(), 0.0);
}

#[test]
fn weighted_ce_examples() {
    let outputs = vec![vec![2.0, 0.0], vec![0.0, 2.0]];
    let got = weighted_ce(&outputs, &[0], &[0.0, 0.0]).unwrap();
    let ce1 = (1.0 + (-2f64).exp()).ln();
    let ce2 = 2f64.ln();
    assert_abs_diff_eq!(got, 0.5 * ce1 + 0.5 * ce2, epsilon = 1e-15);
    assert_abs_diff_eq!(got, 0.4100, epsilon = 1e-4);

    // one-hot at T: plain cross-entropy of the averaged output
    let one_hot = weighted_ce(&outputs, &[0], &[-1e4, 0.0]).unwrap();
    assert_abs_diff_eq!(one_hot, ce2, epsilon = 1e-15);

    let same = vec![vec![0.3, -0.1, 0.8]; 4];
    let c = weighted_ce(&same, &[2], &[0.1, 0.5, -0.3, 0.2]).unwrap();
    assert_abs_diff_eq!(
        c,
        weighted_ce(&same[..1], &[2], &[0.0]).unwrap(),
        epsilon = 1e-12
    );
}

#[test]
fn total_loss_examples() {
    let cfg = LossConfig {
        lambda1: 1e-3,
        lambda2: 1e-3,
        pruning_rate: 0.0,
    };
    assert_abs_diff_eq!(total_loss(0.41, 288.0, 576.0, &cfg), 1.274, epsilon = 1e-12);
    let off = LossConfig {
        lambda1: 0.0,
        lambda2: 0.0,
        pruning_rate: 50.0,
    };
    assert_eq!(total_loss(0.41, 288.0, 576.0, &off), 0.41);
    let small = LossConfig {
        lambda1: 1e-9,
        lambda2: 1e-13,
        pruning_rate: 90.0,
    };
    assert!(small.validate().is_ok());
    assert!(LossConfig {
        lambda1: -1.0,
        ..small
    }
    .validate()
    .is_err());
    assert!(LossConfig {
        pruning_rate: 100.0,
        ..small
    }
    .validate()
    .is_err());
}

#[test]
fn graph_forms_agree_with_plain_forms() {
    let psi = vec![0.2, -0.4, 0.7, 0.1];
    let beta = vec![0.5, 0.0, -0.3];
    let terms = [
        (layer(3, 2, 4, 6, 50.0, vec![0.1, 0.3, 0.2, 0.05]), 0.7),
        (layer(1, 4, 4, 6, 0.0, vec![0.4, 0.0, 0.2, 0.1]), 1.0),
    ];
    let bw = effective_bitwidth(&beta, &[1, 2, 4]).unwrap();
    let plain: Vec<CostTerm> = terms
        .iter()
        .map(|(l, w)| CostTerm {
            layer: l.clone(),
            bitwidth: bw,
            op_weight: *w,
        })
        .collect();
    let psi_w = softmax_slice(&psi);

    let mut g = Graph::new();
    let pv = g.param(Tensor::from_vec(psi.clone()));
    let bv = g.param(Tensor::from_vec(beta));
    let probs = g.softmax(pv).unwrap();
    let vars: Vec<CostTermVar> = terms
        .iter()
        .map(|(l, w)| CostTermVar {
            layer: l.clone(),
            bits: BitSource::Mixed {
                beta: bv,
                bits: vec![1, 2, 4],
            },
            op_weight: Some(g.constant(Tensor::scalar(*w))),
        })
        .collect();
    let (mem, comp) = resource_losses_var(&mut g, &vars, probs).unwrap();
    assert_abs_diff_eq!(g.item(mem), loss_mem(&plain), epsilon = 1e-9);
    assert_abs_diff_eq!(
        g.item(comp),
        loss_comp(&plain, &psi_w).unwrap(),
        epsilon = 1e-9
    );

    let outputs = vec![
        vec![0.2, 1.0, -0.5, 0.3, 0.0, 0.1],
        vec![1.2, -1.0, 0.5, 0.3, 0.9, 0.1],
        vec![0.0, 0.4, -0.2, -0.3, 0.2, 0.6],
        vec![0.7, 0.1, 0.5, 0.8, -0.4, 0.0],
    ];
    let out_vars: Vec<Var> = outputs
        .iter()
        .map(|o| g.constant(Tensor::new(vec![2, 3], o.clone()).unwrap()))
        .collect();
    let ce = weighted_ce_var(&mut g, &out_vars, &[1, 2], probs).unwrap();
    assert_abs_diff_eq!(
        g.item(ce),
        weighted_ce(&outputs, &[1, 2], &psi).unwrap(),
        epsilon = 1e-12
    );
}

#[test]
fn resource_losses_fd_in_psi_and_beta() {
    let l = layer(3, 2, 4, 6, 50.0, vec![0.1, 0.3, 0.2, 0.05]);
    let l2 = l.clone();
    let beta0 = Tensor::from_vec(vec![0.5, 0.0, -0.3]);
    let psi0 = Tensor::from_vec(vec![0.2, -0.4, 0.7, 0.1]);
    let (b0, p0) = (beta0.clone(), psi0.clone());
    let err = finite_diff_check(
        move |g, psi| {
            let probs = g.softmax(psi)?;
            let b = g.constant(b0.clone());
            let terms = [CostTermVar {
                layer: l.clone(),
                bits: BitSource::Mixed {
                    beta: b,
                    bits: vec![1, 2, 4],
                },
                op_weight: None,
            }];
            let (mem, comp) = resource_losses_var(g, &terms, probs)?;
            let c = g.scale(comp, 1e-2);
            g.add(mem, c)
        },
        &psi0,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
    let err = finite_diff_check(
        move |g, beta| {
            let psi = g.constant(p0.clone());
            let probs = g.softmax(psi)?;
            let terms = [CostTermVar {
                layer: l2.clone(),
                bits: BitSource::Mixed {
                    beta,
                    bits: vec![1, 2, 4],
                },
                op_weight: None,
            }];
            let (mem, comp) = resource_losses_var(g, &terms, probs)?;
            g.add(mem, comp)
        },
        &beta0,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn gate_decode_ties_go_low() {
    let g = TimestepGate::<f64>::uniform(4);
    assert_eq!(g.decode(), 1);
    let mut peaked = TimestepGate::<f64>::uniform(6);
    peaked.logits.data_mut()[3] = 0.8;
    assert_eq!(peaked.decode(), 4);
    assert_eq!(
        TimestepGate::<f64>::one_hot(5, 3).weights(),
        vec![0.0, 0.0, 1.0, 0.0, 0.0]
    );
}

proptest! {
    #[test]
    fn one_hot_gate_is_plain_rate_sum(rates in proptest::collection::vec(0.0f64..1.0, 1..9)) {
        let t = rates.len();
        let gate = TimestepGate::<f64>::one_hot(t, t);
        let s = weighted_spike_rate_probs(&rates, &gate.weights()).unwrap();
        prop_assert_eq!(s, rates.iter().fold(0.0, |a, b| a + b));
    }

    #[test]
    fn shifting_mass_later_never_decreases_rate(
        rates in proptest::collection::vec(0.0f64..1.0, 2..9),
        from in 0usize..8,
        amount in 0.0f64..1.0,
    ) {
        let t = rates.len();
        let from = from % (t - 1);
        let mut w = vec![1.0 / t as f64; t];
        let before = weighted_spike_rate_probs(&rates, &w).unwrap();
        let moved = w[from] * amount;
        w[from] -= moved;
        w[from + 1] += moved;
        let after = weighted_spike_rate_probs(&rates, &w).unwrap();
        prop_assert!(after >= before - 1e-12);
    }

    #[test]
    fn running_prefix_matches_recomputation(
        outs in proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, 3), 1..6),
    ) {
        let mut running = [0.0; 3];
        for (k, o) in outs.iter().enumerate() {
            running.iter_mut().zip(o).for_each(|(r, v)| *r += v);
            for c in 0..3 {
                let scratch: f64 = outs[..=k].iter().map(|v| v[c]).sum();
                prop_assert!((running[c] - scratch).abs() <= 1e-12);
            }
        }
    }
}
