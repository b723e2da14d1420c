//! Exact synaptic event accounting on recorded spike tensors.

use crate::autograd::conv::ConvGeometry;
use crate::scalar::Scalar;

/// For each tap `(c_in, ky, kx)`, the number of input spikes it reads summed
/// over all output positions and samples. Length `c_in * kh * kw`.
pub fn tap_spike_counts<T: Scalar>(geom: &ConvGeometry, x: &[T]) -> Vec<u64> {
    let (oh, ow) = (geom.out_h(), geom.out_w());
    let mut counts = vec![0u64; geom.col_rows()];
    let plane = geom.h * geom.w;
    for b in 0..geom.batch {
        for ci in 0..geom.c_in {
            let base = (b * geom.c_in + ci) * plane;
            for ky in 0..geom.kh {
                for kx in 0..geom.kw {
                    let mut n = 0u64;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            if let Some((y, xx)) = geom.source(oy, ox, ky, kx) {
                                if x[base + y * geom.w + xx] != T::zero() {
                                    n += 1;
                                }
                            }
                        }
                    }
                    counts[(ci * geom.kh + ky) * geom.kw + kx] += n;
                }
            }
        }
    }
    counts
}

/// Synaptic events (spike × unpruned synapse) for a binary input, summed
/// over the batch. `mask` follows the `[c_out, c_in, kh, kw]` weight layout.
pub fn synaptic_events<T: Scalar>(geom: &ConvGeometry, x: &[T], mask: Option<&[bool]>) -> u64 {
    let taps = tap_spike_counts(geom, x);
    match mask {
        None => taps.iter().sum::<u64>() * geom.c_out as u64,
        Some(m) => m
            .chunks(taps.len())
            .map(|row| {
                row.iter()
                    .zip(&taps)
                    .filter(|(&keep, _)| keep)
                    .map(|(_, &c)| c)
                    .sum::<u64>()
            })
            .sum(),
    }
}

/// Average spike rate seen across the layer's synapses (zero padding counts
/// as silent input), per sample: `events / (c_out k_h k_w c_in H W batch)`.
pub fn receptive_field_rate<T: Scalar>(geom: &ConvGeometry, x: &[T]) -> f64 {
    let taps: u64 = tap_spike_counts(geom, x).iter().sum();
    let slots = geom.col_rows() * geom.col_cols() * geom.batch;
    taps as f64 / slots as f64
}

/// Number of in-bounds taps over all output positions, per sample and per
/// output channel: the multiply-accumulate count of a dense pass.
pub fn in_bounds_taps(geom: &ConvGeometry) -> u64 {
    let (oh, ow) = (geom.out_h(), geom.out_w());
    let mut n = 0u64;
    for oy in 0..oh {
        for ox in 0..ow {
            for ky in 0..geom.kh {
                for kx in 0..geom.kw {
                    if geom.source(oy, ox, ky, kx).is_some() {
                        n += 1;
                    }
                }
            }
        }
    }
    n * geom.c_in as u64
}

/// Multiply-accumulates of a dense (real-valued input) pass over the batch,
/// skipping pruned weights.
pub fn dense_macs(geom: &ConvGeometry, mask: &[bool]) -> u64 {
    let (oh, ow) = (geom.out_h(), geom.out_w());
    let taps = geom.kh * geom.kw;
    let mut inside = vec![0u64; taps];
    for (t, n) in inside.iter_mut().enumerate() {
        let (ky, kx) = (t / geom.kw, t % geom.kw);
        for oy in 0..oh {
            for ox in 0..ow {
                if geom.source(oy, ox, ky, kx).is_some() {
                    *n += 1;
                }
            }
        }
    }
    let kept: u64 = mask
        .iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(i, _)| inside[i % taps])
        .sum();
    kept * geom.batch as u64
}
