//! Central-difference gradients, the independent oracle for the tape.

use crate::error::Result;
use crate::tensor::{positive, Tensor};

/// Denominator floor used when comparing gradients: components smaller than
/// this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-3;

/// `(f(θ + e·eᵢ) − f(θ − e·eᵢ)) / 2e` for every coordinate `i` of `theta`.
pub fn finite_diff_grad<F>(mut f: F, theta: &Tensor<f64>, eps: f64) -> Result<Tensor<f64>>
where
    F: FnMut(&Tensor<f64>) -> Result<f64>,
{
    let eps = positive(eps, "finite-difference step")?;
    let mut probe = theta.data().to_vec();
    let mut grad = Vec::with_capacity(probe.len());
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let up = f(&Tensor::new(theta.shape(), probe.clone())?)?;
        probe[i] = orig - eps;
        let down = f(&Tensor::new(theta.shape(), probe.clone())?)?;
        probe[i] = orig;
        grad.push((up - down) / (2.0 * eps));
    }
    Tensor::new(theta.shape(), grad)
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Largest [`rel_error`] over matching components.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_error(a, n, floor))
        .fold(0.0, f64::max)
}
