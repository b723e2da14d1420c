//! Central-difference gradient checking.

use super::graph::{Graph, Var};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Absolute disagreement below which a coordinate counts as matching; this
/// absorbs round-off in the difference quotient where the true gradient is 0.
pub const ABS_FLOOR: f64 = 1e-9;

/// Compares the analytic gradient of `f` at `x` with central differences and
/// returns `max_i |analytic_i - numeric_i| / (|analytic_i| + 1e-12)`.
///
/// `f` must build a scalar from the supplied input var.
pub fn finite_diff_check<T, F>(f: F, x: &Tensor<T>, eps: T) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let y = f(&mut g, xv)?;
    g.backward(y)?;
    let analytic: Vec<T> = match g.grad(xv) {
        Some(gr) => gr.to_vec(),
        None => vec![T::zero(); x.len()],
    };

    let eval = |t: Tensor<T>| -> Result<T> {
        let mut g = Graph::new();
        let v = g.constant(t);
        let y = f(&mut g, v)?;
        Ok(g.item(y))
    };

    let mut worst = T::zero();
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (T::two() * eps);
        let diff = (a - numeric).abs();
        if diff <= T::lit(ABS_FLOOR) {
            continue;
        }
        let rel = diff / (a.abs() + T::lit(1e-12));
        worst = worst.max(rel);
    }
    Ok(worst)
}
