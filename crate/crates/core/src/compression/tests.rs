use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autograd::finite_diff_check;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, data).unwrap()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn random_spikes(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n)
            .map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 })
            .collect(),
    )
    .unwrap()
}

#[test]
fn quantize_examples() {
    let w = [0.6, -0.3, 0.1];
    assert_eq!(quantize_values(&w, 2).unwrap(), vec![0.6, -0.6, 0.0]);
    let q1 = quantize_values(&w, 1).unwrap();
    for (a, b) in q1.iter().zip([1.0 / 3.0, -1.0 / 3.0, 1.0 / 3.0]) {
        assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
    }
    assert_eq!(quantize_values(&[0.0, 0.0], 1).unwrap(), vec![0.0, 0.0]);
    assert_eq!(quantize_values(&[0.0, 0.0], 4).unwrap(), vec![0.0, 0.0]);
    assert!(quantize_values::<f64>(&[], 2).is_err());
    assert!(quantize_values(&[1.0], 0).is_err());
}

#[test]
fn mixture_examples() {
    let w = t(&[3], &[0.6, -0.3, 0.1]);
    let one_hot = mixed_precision_average(&w, &[1, 2, 4], &[-1e4, 0.0, -1e4]).unwrap();
    assert_eq!(one_hot.data(), quantize(&w, 2).unwrap().data());

    let mix = mixed_precision_average(&w, &[2, 4], &[0.0, 0.0]).unwrap();
    let d4 = 0.6 / 7.0;
    let expect = [0.6, 0.5 * -0.6 + 0.5 * (-4.0 * d4), 0.5 * d4];
    for (a, b) in mix.data().iter().zip(expect) {
        assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
    }
    assert_abs_diff_eq!(mix.data()[1], -0.4714, epsilon = 1e-4);
    assert_abs_diff_eq!(mix.data()[2], 0.0429, epsilon = 1e-4);

    assert!(mixed_precision_average(&w, &[], &[]).is_err());
    assert!(mixed_precision_average(&w, &[2, 4], &[0.0]).is_err());
}

#[test]
fn mixture_gradient_in_beta_matches_fd() {
    let w = t(&[2, 3], &[0.6, -0.3, 0.1, 0.45, -0.05, -0.8]);
    let probe = t(&[2, 3], &[0.3, -1.0, 0.2, 0.7, 0.4, -0.5]);
    let beta = t(&[3], &[0.2, -0.4, 0.1]);
    let err = finite_diff_check(
        |g, b| {
            let wv = g.constant(w.clone());
            let e = mixed_precision_var(g, wv, &[1, 2, 4], b)?;
            let p = g.constant(probe.clone());
            let y = g.mul(e, p)?;
            Ok(g.sum(y))
        },
        &beta,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn mask_examples() {
    assert_eq!(
        mask_from_scores(&[0.9, 0.1, 0.5, 0.3], 50.0).unwrap(),
        vec![true, false, true, false]
    );
    assert_eq!(
        mask_from_scores(&[0.9, 0.1, 0.5], 0.0).unwrap(),
        vec![true; 3]
    );
    // 0.5 and -0.5 straddle the cut at keep = 2: lower index wins.
    assert_eq!(
        mask_from_scores(&[0.1, 0.5, 0.9, -0.5], 50.0).unwrap(),
        vec![false, true, true, false]
    );
    assert!(mask_from_scores(&[0.1], 100.0).is_err());
    assert!(mask_from_scores(&[0.1], -1.0).is_err());
}

#[test]
fn mask_cardinality_sweep() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for n in 1..=1000usize {
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for p in (0..=90).step_by(10) {
            let mask = mask_from_scores(&scores, p as f64).unwrap();
            let expect = ((100 - p) * n).div_ceil(100);
            assert_eq!(mask.iter().filter(|&&m| m).count(), expect, "n={n} p={p}");
        }
    }
}

#[test]
fn compconv_all_compression_inactive_is_plain_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    // weight already on the 4-bit grid
    let delta = 0.7 / 7.0;
    let grid: Vec<f64> = (0..2 * 3 * 9)
        .map(|_| rng.gen_range(-7i32..=7) as f64 * delta)
        .collect();
    let mut grid = grid;
    grid[0] = 0.7;
    let w = Tensor::new(vec![2, 3, 3, 3], grid).unwrap();
    let mut layer = CompConvLayer::new(w.clone(), vec![1, 2, 4], 0.0, 1, 1).unwrap();
    layer.beta = t(&[3], &[-1e4, -1e4, 0.0]);
    let x = random_spikes(&[2, 3, 5, 5], &mut rng);
    let y = compconv_forward(&x, &layer).unwrap();
    let mut g = Graph::new();
    let (xv, wv) = (g.constant(x), g.constant(w));
    let plain = g.conv2d(xv, wv, 1, 1).unwrap();
    for (a, b) in y.data().iter().zip(g.data(plain)) {
        assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
    }
}

#[test]
fn compconv_single_survivor() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let w = random(&[1, 2, 3, 3], &mut rng);
    // p chosen so that keep_count = 1 over 18 weights
    let mut layer = CompConvLayer::new(w, vec![4], 94.5, 1, 1).unwrap();
    assert_eq!(keep_count(18, 94.5).unwrap(), 1);
    layer.scores.data_mut()[7] = 5.0;
    let x = random_spikes(&[1, 2, 4, 4], &mut rng);
    let y = compconv_forward(&x, &layer).unwrap();
    let survivor = quantize(&layer.weight, 4).unwrap().data()[7];
    // flat 7 -> (ci=0, ky=2, kx=1)
    for oy in 0..4 {
        for ox in 0..4 {
            let (iy, ix) = (oy as isize + 1, ox as isize);
            let v = if (0..4).contains(&iy) && (0..4).contains(&ix) {
                x.data()[iy as usize * 4 + ix as usize] * survivor
            } else {
                0.0
            };
            assert_eq!(y.data()[oy * 4 + ox], v);
        }
    }
}

#[test]
fn compconv_one_by_one_on_ones_sums_input_channels() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let w = random(&[3, 4, 1, 1], &mut rng);
    let layer = CompConvLayer::new(w, vec![2, 4], 50.0, 1, 0).unwrap();
    let x = Tensor::full(&[1, 4, 2, 2], 1.0);
    let y = compconv_forward(&x, &layer).unwrap();
    let wo = layer.output_weight().unwrap();
    for co in 0..3 {
        let s: f64 = wo.data()[co * 4..(co + 1) * 4].iter().sum();
        for p in 0..4 {
            assert_abs_diff_eq!(y.data()[co * 4 + p], s, epsilon = 1e-14);
        }
    }
    assert!(compconv_forward(&Tensor::full(&[1, 4, 2, 2], 0.5), &layer).is_err());
}

#[test]
fn naive_block_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let w = random(&[2, 2, 3, 3], &mut rng);
    let layer = CompConvLayer::new(w, vec![2, 2], 30.0, 1, 1).unwrap();
    let x = random_spikes(&[2, 2, 4, 4], &mut rng);
    // identical branches with equal β: the average of identical quantized weights
    let block = NaiveBranchBlock::replicate(&layer);
    let y = naive_branch_forward(&x, &block).unwrap();
    let single = CompConvLayer {
        bits: vec![2],
        beta: Tensor::zeros(&[1]),
        ..layer.clone()
    };
    let y1 = compconv_forward(&x, &single).unwrap();
    for (a, b) in y.data().iter().zip(y1.data()) {
        assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
    }
    let zero = Tensor::zeros(&[2, 2, 4, 4]);
    assert!(naive_branch_forward(&zero, &block)
        .unwrap()
        .data()
        .iter()
        .all(|&v| v == 0.0));
}

/// Shared design: W and s receive full gradient whatever β is. Naive design:
/// branch j receives the shared gradient scaled by softmax(β)_j.
#[test]
fn gradient_flow_shared_vs_naive() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let w = random(&[2, 2, 3, 3], &mut rng);
    let mut layer = CompConvLayer::new(w, vec![1, 2, 4], 40.0, 1, 1).unwrap();
    layer.beta = t(&[3], &[2.0, -1.0, 0.5]);
    let x = random_spikes(&[1, 2, 4, 4], &mut rng);
    let probe = random(&[1, 2, 4, 4], &mut rng);

    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let (y, wv, sv, _) = layer.forward(&mut g, xv).unwrap();
    let p = g.constant(probe.clone());
    let l = g.mul(y, p).unwrap();
    let l = g.sum(l);
    g.backward(l).unwrap();
    let shared_w = g.grad(wv).unwrap().to_vec();
    assert!(shared_w.iter().any(|&v| v != 0.0));
    assert!(g.grad(sv).unwrap().iter().any(|&v| v != 0.0));

    let block = NaiveBranchBlock::replicate(&layer);
    let mut g = Graph::new();
    let xv = g.constant(x);
    let (y, wvars, _) = block.forward(&mut g, xv).unwrap();
    let p = g.constant(probe);
    let l = g.mul(y, p).unwrap();
    let l = g.sum(l);
    g.backward(l).unwrap();
    let probs = crate::autograd::softmax_slice(layer.beta.data());
    for (j, wj) in wvars.iter().enumerate() {
        for (a, b) in g.grad(*wj).unwrap().iter().zip(&shared_w) {
            assert_abs_diff_eq!(*a, probs[j] * b, epsilon = 1e-12);
        }
    }
}

#[test]
fn histogram_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut w = random(&[4, 4, 3, 3], &mut rng);
    let n = w.len();
    // exact mirror for symmetry
    for i in 0..n / 2 {
        w.data_mut()[n / 2 + i] = -w.data()[i];
    }
    let layer = CompConvLayer::new(w.clone(), vec![2, 4], 50.0, 1, 1).unwrap();
    let h = weight_histogram_export(&layer, 8).unwrap();
    let ws: Vec<usize> = h.series("W").iter().map(|r| r.frequency).collect();
    assert_eq!(ws.iter().sum::<usize>(), n);
    let mirrored: Vec<usize> = ws.iter().rev().copied().collect();
    // bin edges are half-open, so only values exactly on an edge may shift
    let diff: usize = ws.iter().zip(&mirrored).map(|(a, b)| a.abs_diff(*b)).sum();
    assert!(diff <= 2, "{ws:?}");
    let out = h.series("Woutput");
    assert_eq!(out.iter().map(|r| r.frequency).sum::<usize>(), n);
    let zero_bin = out
        .iter()
        .find(|r| r.bin_center - 0.125 * 0.0 >= 0.0)
        .unwrap();
    assert!(zero_bin.frequency >= n / 2);
    assert_eq!(h.pruned_zeros, n / 2);

    let mut binary = CompConvLayer::new(w, vec![1, 2], 0.0, 1, 1).unwrap();
    binary.beta = t(&[2], &[0.0, -1e4]);
    let h = weight_histogram_export(&binary, 10).unwrap();
    assert_eq!(h.series("eW").iter().filter(|r| r.frequency > 0).count(), 2);

    let mut csv = Vec::new();
    h.write_csv(&mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert!(text.starts_with("series,bin_center,frequency\n"));
    assert_eq!(text.lines().count(), 31);
    assert!(weight_histogram_export(&binary, 1).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn quantizer_properties(
        w in proptest::collection::vec(-3.0f64..3.0, 1..40),
        bits in 1u32..9,
    ) {
        let q = quantize_values(&w, bits).unwrap();
        prop_assert_eq!(quantize_values(&q, bits).unwrap(), q.clone());
        if bits >= 2 {
            let delta = step_size(&w, bits);
            for (a, b) in q.iter().zip(&w) {
                prop_assert!((a - b).abs() <= delta / 2.0 + 1e-15);
            }
            if delta > 0.0 {
                prop_assert!(step_size(&w, bits + 1) < delta);
            }
        }
    }

    #[test]
    fn mixture_degenerates_at_large_gap(
        w in proptest::collection::vec(-2.0f64..2.0, 1..30),
        pick in 0usize..3,
    ) {
        let bits = [1, 2, 4];
        let mut beta = vec![0.0; 3];
        beta[pick] = 30.0;
        let wt = Tensor::from_vec(w.clone());
        let mix = mixed_precision_average(&wt, &bits, &beta).unwrap();
        let q = quantize_values(&w, bits[pick]).unwrap();
        for (a, b) in mix.data().iter().zip(&q) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn shared_and_naive_agree_under_one_hot(seed in 0u64..10_000, pick in 0usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cin = rng.gen_range(1..4);
        let cout = rng.gen_range(1..4);
        let stride = rng.gen_range(1..3);
        let w = random(&[cout, cin, 3, 3], &mut rng);
        let p = [0.0, 30.0, 50.0, 90.0][rng.gen_range(0..4)];
        let mut layer = CompConvLayer::new(w, vec![1, 2, 4], p, stride, 1).unwrap();
        let mut beta = vec![f64::NEG_INFINITY; 3];
        beta[pick] = 0.0;
        layer.beta = Tensor::from_vec(beta);
        let x = random_spikes(&[2, cin, 5, 6], &mut rng);
        let a = compconv_forward(&x, &layer).unwrap();
        let b = naive_branch_forward(&x, &NaiveBranchBlock::replicate(&layer)).unwrap();
        prop_assert_eq!(a.data(), b.data());
    }
}
