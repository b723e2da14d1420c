use std::collections::HashMap;
use std::rc::Rc;

use super::conv::{self, ConvGeometry};
use crate::error::{Result, SnasError};
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// What a backward rule sees for one node.
pub struct RuleContext<'a, T> {
    pub inputs: Vec<&'a Tensor<T>>,
    pub output: &'a Tensor<T>,
    pub grad_output: &'a [T],
}

/// Maps upstream gradient to one optional gradient per input.
pub type BackwardRule<T> = Rc<dyn Fn(&RuleContext<'_, T>) -> Vec<Option<Vec<T>>>>;

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Vec<T>),
    Scale(Var, T),
    ScaleBy(Var, Var),
    Sum(Var),
    MeanAxes {
        x: Var,
        keep: Vec<usize>,
    },
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeometry,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Softmax(Var),
    Select {
        x: Var,
        index: usize,
    },
    CrossEntropy {
        logits: Var,
        probs: Vec<T>,
        labels: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    Heaviside(Var),
    Quantize(Var),
    TopKMask {
        e: Var,
        scores: Var,
        mask: Vec<bool>,
    },
    SubsampleDup {
        x: Var,
        in_shape: [usize; 4],
    },
    Custom(Vec<Var>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so node ids are
/// already a topological order.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    rules: HashMap<usize, BackwardRule<T>>,
    check_nan: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(SnasError::shape(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

/// Row-major strides helper: (outer, dim, inner) around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            rules: HashMap::new(),
            check_nan: cfg!(debug_assertions),
        }
    }

    /// Enables or disables the NaN scan on every produced value.
    pub fn set_nan_check(&mut self, on: bool) {
        self.check_nan = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> Result<&Node<T>> {
        self.nodes.get(v.0).ok_or(SnasError::UnknownNode(v.0))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient after [`Graph::backward`], if any reached this node.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        if self.check_nan && value.has_nan() {
            log_nan(self.nodes.len());
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Inserts a tensor; gradient tracking follows `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let rg = t.requires_grad();
        let mut t = t;
        t.zero_grad();
        self.push(t, Op::Leaf, rg)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        same_shape(name, av.shape(), bv.shape())?;
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Sums a non-empty list of same-shape tensors left to right.
    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        let (&first, rest) = xs
            .split_first()
            .ok_or_else(|| SnasError::invalid("add_n of an empty list"))?;
        rest.iter().try_fold(first, |acc, &x| self.add(acc, x))
    }

    /// Elementwise product with a constant factor tensor (no gradient to the factor).
    pub fn mul_const(&mut self, x: Var, factor: Vec<T>) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if factor.len() != xv.len() {
            return Err(SnasError::shape(
                "mul_const",
                format!("factor length {} vs {:?}", factor.len(), xv.shape()),
            ));
        }
        let data = xv
            .data()
            .iter()
            .zip(&factor)
            .map(|(&a, &b)| a * b)
            .collect();
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::MulConst(x, factor), rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.nodes[x.0].value.map(|v| v * c);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, c), rg)
    }

    /// `x * s` where `s` is a single-element tensor.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = &self.nodes[s.0].value;
        if sv.len() != 1 {
            return Err(SnasError::shape(
                "scale_by",
                format!("scale has shape {:?}", sv.shape()),
            ));
        }
        let c = sv.item();
        let out = self.nodes[x.0].value.map(|v| v * c);
        let rg = self.rg(&[x, s]);
        Ok(self.push(out, Op::ScaleBy(x, s), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.nodes[x.0].value.sum());
        let rg = self.rg(&[x]);
        self.push(out, Op::Sum(x), rg)
    }

    /// Mean over the listed axes; those axes are dropped from the result.
    pub fn mean_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axes.iter().any(|&a| a >= shape.len()) {
            return Err(SnasError::shape(
                "mean_axes",
                format!("axes {axes:?} for {shape:?}"),
            ));
        }
        let keep: Vec<usize> = (0..shape.len()).filter(|a| !axes.contains(a)).collect();
        let out_shape: Vec<usize> = if keep.is_empty() {
            vec![1]
        } else {
            keep.iter().map(|&a| shape[a]).collect()
        };
        let count: usize = axes.iter().map(|&a| shape[a]).product();
        let inv = T::one() / T::from_count(count);
        let mut out = vec![T::zero(); numel(&out_shape)];
        let data = self.data(x);
        for (flat, &v) in data.iter().enumerate() {
            out[reduced_index(flat, &shape, &keep)] += v;
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::MeanAxes { x, keep },
            rg,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(SnasError::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        conv::gemm_acc(self.data(a), self.data(b), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    /// `x [batch, in] · w[out, in]^T + b[out]`
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (
            self.shape(x).to_vec(),
            self.shape(w).to_vec(),
            self.shape(b).to_vec(),
        );
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] || sb != [sw[0]] {
            return Err(SnasError::shape(
                "linear",
                format!("x {sx:?}, w {sw:?}, b {sb:?}"),
            ));
        }
        let (batch, fin, fout) = (sx[0], sx[1], sw[0]);
        let mut out = Vec::with_capacity(batch * fout);
        for _ in 0..batch {
            out.extend_from_slice(self.data(b));
        }
        conv::gemm_bt_acc(self.data(x), self.data(w), &mut out, batch, fin, fout);
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(
            Tensor::from_parts(vec![batch, fout], out),
            Op::Linear { x, w, b },
            rg,
        ))
    }

    /// 2-D convolution of `x [b, c_in, h, w]` with an odd-sized kernel `w [c_out, c_in, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(SnasError::shape(
                "conv2d",
                format!("input {sx:?}, kernel {sw:?}"),
            ));
        }
        if sw[2] % 2 == 0 || sw[3] % 2 == 0 {
            return Err(SnasError::shape(
                "conv2d",
                format!("kernel must be odd-sized, got {sw:?}"),
            ));
        }
        if stride == 0 || sx[2] + 2 * pad < sw[2] || sx[3] + 2 * pad < sw[3] {
            return Err(SnasError::shape(
                "conv2d",
                format!("stride {stride}, pad {pad} invalid for input {sx:?}, kernel {sw:?}"),
            ));
        }
        let geom = ConvGeometry {
            batch: sx[0],
            c_in: sx[1],
            h: sx[2],
            w: sx[3],
            c_out: sw[0],
            kh: sw[2],
            kw: sw[3],
            stride,
            pad,
        };
        let out = conv::conv2d_forward(&geom, self.data(x), self.data(w));
        let shape = vec![geom.batch, geom.c_out, geom.out_h(), geom.out_w()];
        let rg = self.rg(&[x, w]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Conv2d { x, w, geom },
            rg,
        ))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| SnasError::invalid("concat of an empty list"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(SnasError::shape(
                "concat",
                format!("axis {axis} for {base:?}"),
            ));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let ok = s.len() == base.len()
                && s.iter()
                    .enumerate()
                    .all(|(i, &d)| i == axis || d == base[i]);
            if !ok {
                return Err(SnasError::shape(
                    "concat",
                    format!("{s:?} incompatible with {base:?} along axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &v in xs {
                let d = self.shape(v)[axis];
                out.extend_from_slice(&self.data(v)[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let rg = self.rg(xs);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(SnasError::shape(
                "slice",
                format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, d, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        let data = self.data(x);
        for o in 0..outer {
            let base = o * d * inner + start * inner;
            out.extend_from_slice(&data[base..base + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(oshape, out),
            Op::Slice { x, axis, start },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v.with_requires_grad(false), Op::Reshape(x), rg))
    }

    /// Softmax over a 1-D vector.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 1 {
            return Err(SnasError::shape(
                "softmax",
                format!("expects a vector, got {shape:?}"),
            ));
        }
        let out = softmax_slice(self.data(x));
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax(x), rg))
    }

    /// Element `index` of a tensor as a single-element tensor.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let n = self.value(x).len();
        if index >= n {
            return Err(SnasError::shape(
                "select",
                format!("index {index} of {n} elements"),
            ));
        }
        let v = self.data(x)[index];
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(v), Op::Select { x, index }, rg))
    }

    /// Mean cross-entropy of `logits [batch, classes]` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(SnasError::shape(
                "cross_entropy",
                format!("logits {shape:?} with {} labels", labels.len()),
            ));
        }
        let k = shape[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(SnasError::invalid(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let data = self.data(logits);
        let mut probs = Vec::with_capacity(data.len());
        let mut loss = T::zero();
        for (row, &y) in data.chunks(k).zip(labels) {
            let p = softmax_slice(row);
            loss -= p[y].ln();
            probs.extend(p);
        }
        loss /= T::from_count(labels.len());
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Training-mode batch norm over axes (0, 2, 3) of `x [n, c, h, w]`.
    /// Returns the output and the per-channel (mean, biased variance) used.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, Vec<T>, Vec<T>)> {
        let shape = self.shape(x).to_vec();
        check_bn_shapes(&shape, self.shape(gamma), self.shape(beta))?;
        let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        let data = self.data(x);
        let count = T::from_count(n * hw);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for b in 0..n {
            for ch in 0..c {
                let s = &data[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                mean[ch] += s.iter().copied().sum::<T>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for b in 0..n {
            for ch in 0..c {
                let s = &data[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                var[ch] += s
                    .iter()
                    .map(|&v| (v - mean[ch]) * (v - mean[ch]))
                    .sum::<T>();
            }
        }
        var.iter_mut().for_each(|v| *v /= count);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (gd, bd) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![T::zero(); data.len()];
        let mut out = vec![T::zero(); data.len()];
        for b in 0..n {
            for ch in 0..c {
                for i in 0..hw {
                    let idx = (b * c + ch) * hw + i;
                    xhat[idx] = (data[idx] - mean[ch]) * inv_std[ch];
                    out[idx] = gd[ch] * xhat[idx] + bd[ch];
                }
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        let v = self.push(
            Tensor::from_parts(shape, out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        );
        Ok((v, mean, var))
    }

    /// Inference-mode batch norm with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: T,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_bn_shapes(&shape, self.shape(gamma), self.shape(beta))?;
        let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        if mean.len() != c || var.len() != c {
            return Err(SnasError::shape("batch_norm_eval", "running stats length"));
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (data, gd, bd) = (self.data(x), self.data(gamma), self.data(beta));
        let mut out = vec![T::zero(); data.len()];
        for b in 0..n {
            for ch in 0..c {
                for i in 0..hw {
                    let idx = (b * c + ch) * hw + i;
                    out[idx] = gd[ch] * (data[idx] - mean[ch]) * inv_std[ch] + bd[ch];
                }
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean: mean.to_vec(),
                inv_std,
            },
            rg,
        ))
    }

    /// `1` where `x >= threshold`, else `0`. Analytic gradient is zero;
    /// register a surrogate with [`Graph::register_custom_gradient`].
    pub fn heaviside(&mut self, x: Var, threshold: T) -> Var {
        let out = self
            .value(x)
            .map(|v| if v >= threshold { T::one() } else { T::zero() });
        let rg = self.rg(&[x]);
        self.push(out, Op::Heaviside(x), rg)
    }

    /// Inserts an already-computed discrete transform of `x` (rounding,
    /// quantization). Analytic gradient is zero almost everywhere.
    pub fn discrete(&mut self, x: Var, value: Tensor<T>) -> Result<Var> {
        same_shape("discrete", self.shape(x), value.shape())?;
        let rg = self.rg(&[x]);
        Ok(self.push(value.with_requires_grad(false), Op::Quantize(x), rg))
    }

    /// `e ⊙ mask` with `mask` the given binary keep pattern over `scores`.
    /// Backward: `∂/∂e = g·mask`; `∂/∂s = g·e·sign(s)` (straight-through on the mask).
    pub fn apply_mask(&mut self, e: Var, scores: Var, mask: Vec<bool>) -> Result<Var> {
        same_shape("apply_mask", self.shape(e), self.shape(scores))?;
        if mask.len() != self.value(e).len() {
            return Err(SnasError::shape("apply_mask", "mask length"));
        }
        let ev = self.value(e);
        let data = ev
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| if m { v } else { T::zero() })
            .collect();
        let out = Tensor::from_parts(ev.shape().to_vec(), data);
        let rg = self.rg(&[e, scores]);
        Ok(self.push(out, Op::TopKMask { e, scores, mask }, rg))
    }

    /// Stride-2 spatial subsampling followed by channel duplication:
    /// `[b, c, h, w] -> [b, 2c, ceil(h/2), ceil(w/2)]`.
    pub fn subsample_dup(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(SnasError::shape(
                "subsample_dup",
                format!("expects 4-D, got {s:?}"),
            ));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        let data = self.data(x);
        let mut out = Vec::with_capacity(b * 2 * c * oh * ow);
        for bi in 0..b {
            for _copy in 0..2 {
                for ch in 0..c {
                    for y in 0..oh {
                        for xx in 0..ow {
                            out.push(data[((bi * c + ch) * h + 2 * y) * w + 2 * xx]);
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![b, 2 * c, oh, ow], out),
            Op::SubsampleDup {
                x,
                in_shape: [b, c, h, w],
            },
            rg,
        ))
    }

    /// A forward value computed outside the engine, differentiated by `rule`.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<T>, rule: BackwardRule<T>) -> Var {
        let rg = self.rg(inputs);
        let v = self.push(
            value.with_requires_grad(false),
            Op::Custom(inputs.to_vec()),
            rg,
        );
        self.rules.insert(v.0, rule);
        v
    }

    /// Replaces the backward rule of node `v`; its forward value is unchanged.
    pub fn register_custom_gradient(&mut self, v: Var, rule: BackwardRule<T>) -> Result<()> {
        self.node(v)?;
        self.rules.insert(v.0, rule);
        Ok(())
    }

    fn inputs_of(op: &Op<T>) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::MulConst(x, _)
            | Op::Scale(x, _)
            | Op::Sum(x)
            | Op::Reshape(x)
            | Op::Softmax(x)
            | Op::Heaviside(x)
            | Op::Quantize(x) => vec![*x],
            Op::ScaleBy(x, s) => vec![*x, *s],
            Op::MeanAxes { x, .. }
            | Op::Slice { x, .. }
            | Op::Select { x, .. }
            | Op::SubsampleDup { x, .. } => vec![*x],
            Op::Linear { x, w, b } => vec![*x, *w, *b],
            Op::Conv2d { x, w, .. } => vec![*x, *w],
            Op::Concat { xs, .. } | Op::Custom(xs) => xs.clone(),
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::BatchNorm { x, gamma, beta, .. } | Op::BatchNormEval { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
            Op::TopKMask { e, scores, .. } => vec![*e, *scores],
        }
    }

    /// Reverse pass from a scalar `loss`. Gradients are added to whatever each
    /// node already holds, so repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.node(loss)?.value.shape().to_vec();
        if numel(&shape) != 1 {
            return Err(SnasError::NonScalarLoss(shape));
        }
        let mut adj: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            let input_grads = self.local_backward(id, &g);
            for (inp, ig) in input_grads {
                if !self.nodes[inp.0].requires_grad {
                    continue;
                }
                match adj[inp.0].as_mut() {
                    Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, &b)| *a += b),
                    None => adj[inp.0] = Some(ig),
                }
            }
            let node = &mut self.nodes[id];
            match node.grad.as_mut() {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn local_backward(&self, id: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[id];
        if let Some(rule) = self.rules.get(&id) {
            let inputs = Self::inputs_of(&node.op);
            let ctx = RuleContext {
                inputs: inputs.iter().map(|v| &self.nodes[v.0].value).collect(),
                output: &node.value,
                grad_output: g,
            };
            return inputs
                .into_iter()
                .zip(rule(&ctx))
                .filter_map(|(v, gr)| gr.map(|gr| (v, gr)))
                .collect();
        }
        let val = |v: &Var| self.nodes[v.0].value.data();
        let need = |v: &Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf | Op::Custom(_) => vec![],
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|&x| -x).collect())],
            Op::Mul(a, b) => vec![
                (*a, g.iter().zip(val(b)).map(|(&x, &y)| x * y).collect()),
                (*b, g.iter().zip(val(a)).map(|(&x, &y)| x * y).collect()),
            ],
            Op::MulConst(x, f) => vec![(*x, g.iter().zip(f).map(|(&a, &b)| a * b).collect())],
            Op::Scale(x, c) => vec![(*x, g.iter().map(|&v| v * *c).collect())],
            Op::ScaleBy(x, s) => {
                let c = val(s)[0];
                let ds = g
                    .iter()
                    .zip(val(x))
                    .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                vec![(*x, g.iter().map(|&v| v * c).collect()), (*s, vec![ds])]
            }
            Op::Sum(x) => vec![(*x, vec![g[0]; val(x).len()])],
            Op::MeanAxes { x, keep } => {
                let shape = self.nodes[x.0].value.shape();
                let count = numel(shape) / node.value.len();
                let inv = T::one() / T::from_count(count);
                let gx = (0..numel(shape))
                    .map(|flat| g[reduced_index(flat, shape, keep)] * inv)
                    .collect();
                vec![(*x, gx)]
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let mut out = vec![];
                if need(a) {
                    let mut ga = vec![T::zero(); m * k];
                    conv::gemm_bt_acc(g, val(b), &mut ga, m, n, k);
                    out.push((*a, ga));
                }
                if need(b) {
                    let mut gb = vec![T::zero(); k * n];
                    conv::gemm_at_acc(val(a), g, &mut gb, m, k, n);
                    out.push((*b, gb));
                }
                out
            }
            Op::Linear { x, w, b } => {
                let sx = self.nodes[x.0].value.shape();
                let (batch, fin) = (sx[0], sx[1]);
                let fout = self.nodes[w.0].value.shape()[0];
                let mut out = vec![];
                if need(x) {
                    let mut gx = vec![T::zero(); batch * fin];
                    conv::gemm_acc(g, val(w), &mut gx, batch, fout, fin);
                    out.push((*x, gx));
                }
                if need(w) {
                    let mut gw = vec![T::zero(); fout * fin];
                    conv::gemm_at_acc(g, val(x), &mut gw, batch, fout, fin);
                    out.push((*w, gw));
                }
                if need(b) {
                    let mut gb = vec![T::zero(); fout];
                    for row in g.chunks(fout) {
                        gb.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                    }
                    out.push((*b, gb));
                }
                out
            }
            Op::Conv2d { x, w, geom } => {
                let (gx, gw) = conv::conv2d_backward(geom, val(x), val(w), g, need(x), need(w));
                let mut out = vec![];
                if let Some(gx) = gx {
                    out.push((*x, gx));
                }
                if let Some(gw) = gw {
                    out.push((*w, gw));
                }
                out
            }
            Op::Concat { xs, axis } => {
                let shape = node.value.shape();
                let (outer, total, inner) = split_axis(shape, *axis);
                let mut offset = 0;
                let mut out = vec![];
                for v in xs {
                    let d = self.nodes[v.0].value.shape()[*axis];
                    let mut gi = Vec::with_capacity(outer * d * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        gi.extend_from_slice(&g[base..base + d * inner]);
                    }
                    offset += d;
                    out.push((*v, gi));
                }
                out
            }
            Op::Slice { x, axis, start } => {
                let in_shape = self.nodes[x.0].value.shape();
                let (outer, d, inner) = split_axis(in_shape, *axis);
                let len = node.value.shape()[*axis];
                let mut gx = vec![T::zero(); numel(in_shape)];
                for o in 0..outer {
                    let dst = o * d * inner + start * inner;
                    let src = o * len * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                vec![(*x, gx)]
            }
            Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::Softmax(x) => {
                let s = node.value.data();
                let dot = s.iter().zip(g).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                vec![(
                    *x,
                    s.iter().zip(g).map(|(&si, &gi)| si * (gi - dot)).collect(),
                )]
            }
            Op::Select { x, index } => {
                let mut gx = vec![T::zero(); val(x).len()];
                gx[*index] = g[0];
                vec![(*x, gx)]
            }
            Op::CrossEntropy {
                logits,
                probs,
                labels,
            } => {
                let k = probs.len() / labels.len();
                let scale = g[0] / T::from_count(labels.len());
                let mut gx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (i, &y) in labels.iter().enumerate() {
                    gx[i * k + y] -= scale;
                }
                vec![(*logits, gx)]
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let shape = self.nodes[x.0].value.shape();
                let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                let count = T::from_count(n * hw);
                let gd = val(gamma);
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        for i in 0..hw {
                            let idx = (b * c + ch) * hw + i;
                            sum_g[ch] += g[idx];
                            sum_gx[ch] += g[idx] * xhat[idx];
                        }
                    }
                }
                let mut out = vec![];
                if need(x) {
                    let mut gx = vec![T::zero(); g.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let k = gd[ch] * inv_std[ch] / count;
                            for i in 0..hw {
                                let idx = (b * c + ch) * hw + i;
                                gx[idx] = k * (count * g[idx] - sum_g[ch] - xhat[idx] * sum_gx[ch]);
                            }
                        }
                    }
                    out.push((*x, gx));
                }
                out.push((*gamma, sum_gx));
                out.push((*beta, sum_g));
                out
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let shape = self.nodes[x.0].value.shape();
                let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                let (xd, gd) = (val(x), val(gamma));
                let mut gx = vec![T::zero(); g.len()];
                let mut gg = vec![T::zero(); c];
                let mut gb = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        for i in 0..hw {
                            let idx = (b * c + ch) * hw + i;
                            gx[idx] = g[idx] * gd[ch] * inv_std[ch];
                            gg[ch] += g[idx] * (xd[idx] - mean[ch]) * inv_std[ch];
                            gb[ch] += g[idx];
                        }
                    }
                }
                vec![(*x, gx), (*gamma, gg), (*beta, gb)]
            }
            Op::Heaviside(x) | Op::Quantize(x) => vec![(*x, vec![T::zero(); g.len()])],
            Op::TopKMask { e, scores, mask } => {
                let ge = g
                    .iter()
                    .zip(mask)
                    .map(|(&v, &m)| if m { v } else { T::zero() })
                    .collect();
                let gs = g
                    .iter()
                    .zip(val(e))
                    .zip(val(scores))
                    .map(|((&gv, &ev), &sv)| {
                        let sign = if sv < T::zero() { -T::one() } else { T::one() };
                        gv * ev * sign
                    })
                    .collect();
                vec![(*e, ge), (*scores, gs)]
            }
            Op::SubsampleDup { x, in_shape } => {
                let [b, c, h, w] = *in_shape;
                let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
                let mut gx = vec![T::zero(); b * c * h * w];
                for bi in 0..b {
                    for copy in 0..2 {
                        for ch in 0..c {
                            for y in 0..oh {
                                for xx in 0..ow {
                                    let src = (((bi * 2 + copy) * c + ch) * oh + y) * ow + xx;
                                    gx[((bi * c + ch) * h + 2 * y) * w + 2 * xx] += g[src];
                                }
                            }
                        }
                    }
                }
                vec![(*x, gx)]
            }
        }
    }
}

fn check_bn_shapes(x: &[usize], gamma: &[usize], beta: &[usize]) -> Result<()> {
    if x.len() != 4 || gamma != [x[1]] || beta != [x[1]] {
        return Err(SnasError::shape(
            "batch_norm",
            format!("x {x:?}, gamma {gamma:?}, beta {beta:?}"),
        ));
    }
    Ok(())
}

fn reduced_index(flat: usize, shape: &[usize], keep: &[usize]) -> usize {
    let mut rem = flat;
    let mut coords = vec![0; shape.len()];
    for a in (0..shape.len()).rev() {
        coords[a] = rem % shape[a];
        rem /= shape[a];
    }
    keep.iter().fold(0, |acc, &a| acc * shape[a] + coords[a])
}

/// Numerically stable softmax of a slice.
pub fn softmax_slice<T: Scalar>(x: &[T]) -> Vec<T> {
    let m = x.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let e: Vec<T> = x.iter().map(|&v| (v - m).exp()).collect();
    let z = e.iter().fold(T::zero(), |a, &b| a + b);
    e.into_iter().map(|v| v / z).collect()
}

#[cold]
fn log_nan(id: usize) {
    eprintln!("warning: NaN produced at graph node {id}");
}
