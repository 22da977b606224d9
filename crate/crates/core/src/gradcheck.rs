//! Central finite differences, used as an independent oracle for analytic gradients.
//!
//! Only forward evaluations are used here, so a bug in a backward rule cannot
//! leak into the reference values.

use crate::error::Result;
use crate::tensor::{no_grad, Tensor};

/// Numerical gradient of the scalar `f` at `x` with step `h`.
pub fn numerical_gradient<F>(x: &[f64], shape: &[usize], h: f64, mut f: F) -> Result<Vec<f64>>
where
    F: FnMut(&Tensor<f64>) -> Result<f64>,
{
    let _g = no_grad();
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&Tensor::from_vec(probe.clone(), shape)?)?;
        probe[i] = orig - h;
        let down = f(&Tensor::from_vec(probe.clone(), shape)?)?;
        probe[i] = orig;
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// Largest violation of `|a - n| <= rtol·max(|a|,|n|) + atol` over all entries,
/// reported as the ratio `|a - n| / (rtol·max(|a|,|n|) + atol)`. Values `<= 1` pass.
pub fn worst_ratio(analytic: &[f64], numeric: &[f64], rtol: f64, atol: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / (rtol * a.abs().max(n.abs()) + atol))
        .fold(0.0, f64::max)
}

/// Compares the analytic gradient of `f` at `x` against central differences.
///
/// Returns the worst tolerance ratio (see [`worst_ratio`]).
pub fn check<F>(x: &[f64], shape: &[usize], h: f64, rtol: f64, atol: f64, mut f: F) -> Result<f64>
where
    F: FnMut(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    let leaf = Tensor::param(x.to_vec(), shape)?;
    f(&leaf)?.backward(false)?;
    let analytic = leaf
        .grad()
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![0.0; x.len()]);
    let numeric = numerical_gradient(x, shape, h, |t| Ok(f(t)?.item()))?;
    Ok(worst_ratio(&analytic, &numeric, rtol, atol))
}
