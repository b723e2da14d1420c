//! im2col-based 2-D convolution kernels over raw slices.

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

pub fn out_dim(size: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - kernel) / stride + 1
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        out_dim(self.h, self.kh, self.stride, self.pad)
    }

    pub fn out_w(&self) -> usize {
        out_dim(self.w, self.kw, self.stride, self.pad)
    }

    /// Rows of the im2col matrix: one per (c_in, ky, kx) tap.
    pub fn col_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.out_h() * self.out_w()
    }

    /// Input coordinate read by output pixel (oy, ox) at tap (ky, kx), if in bounds.
    #[inline]
    pub fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky) as isize - self.pad as isize;
        let x = (ox * self.stride + kx) as isize - self.pad as isize;
        if y < 0 || x < 0 || y >= self.h as isize || x >= self.w as isize {
            None
        } else {
            Some((y as usize, x as usize))
        }
    }
}

/// Unfolds one sample `[c_in, h, w]` into `[c_in*kh*kw, out_h*out_w]`.
pub fn im2col<T: Scalar>(g: &ConvGeometry, sample: &[T], cols: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    for ci in 0..g.c_in {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    for ox in 0..ow {
                        dst[oy * ow + ox] = match g.source(oy, ox, ky, kx) {
                            Some((y, x)) => sample[(ci * g.h + y) * g.w + x],
                            None => T::zero(),
                        };
                    }
                }
            }
        }
    }
}

/// Folds column gradients back onto one sample, accumulating.
pub fn col2im<T: Scalar>(g: &ConvGeometry, cols: &[T], sample: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    for ci in 0..g.c_in {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    for ox in 0..ow {
                        if let Some((y, x)) = g.source(oy, ox, ky, kx) {
                            sample[(ci * g.h + y) * g.w + x] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c[m,n] += a[m,k] * b[k,n]`
pub fn gemm_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == T::zero() {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m,n] += a[m,k] * b[n,k]^T`
pub fn gemm_bt_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            c[i * n + j] += s;
        }
    }
}

/// `c[k,n] += a[m,k]^T * b[m,n]`
pub fn gemm_at_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == T::zero() {
                continue;
            }
            let crow = &mut c[kk * n..(kk + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(g: &ConvGeometry, x: &[T], w: &[T]) -> Vec<T> {
    let (k, p) = (g.col_rows(), g.col_cols());
    let in_stride = g.c_in * g.h * g.w;
    let mut out = vec![T::zero(); g.batch * g.c_out * p];
    let mut cols = vec![T::zero(); k * p];
    for b in 0..g.batch {
        im2col(g, &x[b * in_stride..(b + 1) * in_stride], &mut cols);
        gemm_acc(
            w,
            &cols,
            &mut out[b * g.c_out * p..(b + 1) * g.c_out * p],
            g.c_out,
            k,
            p,
        );
    }
    out
}

/// Returns `(grad_x, grad_w)` for upstream gradient `gy` of shape `[b, c_out, oh, ow]`.
pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeometry,
    x: &[T],
    w: &[T],
    gy: &[T],
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (k, p) = (g.col_rows(), g.col_cols());
    let in_stride = g.c_in * g.h * g.w;
    let mut gx = need_x.then(|| vec![T::zero(); x.len()]);
    let mut gw = need_w.then(|| vec![T::zero(); w.len()]);
    let mut cols = vec![T::zero(); k * p];
    let mut gcols = vec![T::zero(); k * p];
    for b in 0..g.batch {
        let gyb = &gy[b * g.c_out * p..(b + 1) * g.c_out * p];
        if let Some(gw) = gw.as_mut() {
            im2col(g, &x[b * in_stride..(b + 1) * in_stride], &mut cols);
            gemm_bt_acc(gyb, &cols, gw, g.c_out, p, k);
        }
        if let Some(gx) = gx.as_mut() {
            gcols.iter_mut().for_each(|v| *v = T::zero());
            gemm_at_acc(w, gyb, &mut gcols, g.c_out, k, p);
            col2im(g, &gcols, &mut gx[b * in_stride..(b + 1) * in_stride]);
        }
    }
    (gx, gw)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn direct_conv(g: &ConvGeometry, x: &[f64], w: &[f64]) -> Vec<f64> {
        let (oh, ow) = (g.out_h(), g.out_w());
        let mut out = vec![0.0; g.batch * g.c_out * oh * ow];
        for b in 0..g.batch {
            for co in 0..g.c_out {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = 0.0;
                        for ci in 0..g.c_in {
                            for ky in 0..g.kh {
                                for kx in 0..g.kw {
                                    if let Some((y, xx)) = g.source(oy, ox, ky, kx) {
                                        s += x[((b * g.c_in + ci) * g.h + y) * g.w + xx]
                                            * w[((co * g.c_in + ci) * g.kh + ky) * g.kw + kx];
                                    }
                                }
                            }
                        }
                        out[((b * g.c_out + co) * oh + oy) * ow + ox] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn im2col_matches_direct_summation() {
        for &(stride, pad, h, w) in &[(1, 1, 5, 4), (2, 1, 7, 6), (2, 0, 5, 5), (1, 0, 3, 3)] {
            let g = ConvGeometry {
                batch: 2,
                c_in: 3,
                h,
                w,
                c_out: 2,
                kh: 3,
                kw: 3,
                stride,
                pad,
            };
            let x: Vec<f64> = (0..2 * 3 * h * w)
                .map(|i| ((i * 7 % 11) as f64) - 5.0)
                .collect();
            let wt: Vec<f64> = (0..2 * 3 * 9)
                .map(|i| ((i * 5 % 7) as f64) * 0.25 - 0.5)
                .collect();
            let fast = conv2d_forward(&g, &x, &wt);
            let slow = direct_conv(&g, &x, &wt);
            assert_eq!(fast.len(), slow.len());
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn strided_output_sizes() {
        assert_eq!(out_dim(32, 3, 2, 1), 16);
        assert_eq!(out_dim(98, 3, 2, 1), 49);
        assert_eq!(out_dim(49, 3, 2, 1), 25);
        assert_eq!(out_dim(49, 1, 2, 0), 25);
    }
}
