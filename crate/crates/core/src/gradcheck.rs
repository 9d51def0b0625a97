//! Finite-difference gradient checking.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Components smaller than this fraction of the largest analytic gradient
/// entry are compared on that scale instead of their own.
pub const RELATIVE_FLOOR: f64 = 1e-3;

/// Compares the autodiff gradient of a scalar function against central
/// differences with step `eps`, returning the largest componentwise relative
/// error. Components where both gradients are exactly zero count as zero error.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let analytic = autodiff_grad(&f, x)?;
    let numeric = numeric_grad(&f, x, eps)?;
    Ok(max_relative_error(analytic.data(), &numeric))
}

/// Gradient of `f` at `x` by reverse-mode autodiff.
pub fn autodiff_grad<F>(f: &F, x: &Tensor) -> Result<Tensor>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let y = f(&mut g, xv)?;
    let mut grads = g.backward(y)?;
    Ok(grads
        .take(xv)
        .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec())))
}

/// Central-difference gradient of `f` at `x`.
pub fn numeric_grad<F>(f: &F, x: &Tensor, eps: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(t);
        let y = f(&mut g, v)?;
        let out = g.value(y);
        if !out.is_scalar() {
            return Err(Error::invalid("grad_check", "function must be scalar-valued"));
        }
        Ok(out.item())
    };
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        out.push((eval(plus)? - eval(minus)?) / (2.0 * eps));
    }
    Ok(out)
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs())) * RELATIVE_FLOOR;
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| {
            let diff = (a - n).abs();
            if diff == 0.0 {
                0.0
            } else {
                diff / a.abs().max(n.abs()).max(scale)
            }
        })
        .fold(0.0, f64::max)
}
