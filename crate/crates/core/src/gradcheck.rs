//! Central finite-difference helpers for verifying analytic derivatives.
//!
//! These are deliberately independent of the dynamic-programming code they
//! check: they only evaluate the supplied closures at perturbed points.

use ndarray::{Array1, Array2};

/// Central-difference gradient of a scalar function.
pub fn central_diff_grad<F>(f: F, x: &Array1<f64>, eps: f64) -> Array1<f64>
where
    F: Fn(&Array1<f64>) -> f64,
{
    let mut grad = Array1::zeros(x.len());
    let mut point = x.clone();
    for i in 0..x.len() {
        point[i] = x[i] + eps;
        let plus = f(&point);
        point[i] = x[i] - eps;
        let minus = f(&point);
        point[i] = x[i];
        grad[i] = (plus - minus) / (2.0 * eps);
    }
    grad
}

/// Central-difference derivatives of a vector function; `rows[i]` is the
/// derivative of the whole output with respect to input coordinate `i`.
pub fn central_diff_rows<F>(f: F, x: &Array1<f64>, eps: f64) -> Array2<f64>
where
    F: Fn(&Array1<f64>) -> Array1<f64>,
{
    let probe = f(x);
    let mut out = Array2::zeros((x.len(), probe.len()));
    let mut point = x.clone();
    for i in 0..x.len() {
        point[i] = x[i] + eps;
        let plus = f(&point);
        point[i] = x[i] - eps;
        let minus = f(&point);
        point[i] = x[i];
        for j in 0..probe.len() {
            out[[i, j]] = (plus[j] - minus[j]) / (2.0 * eps);
        }
    }
    out
}

/// Max-norm relative error of `approx` against `exact`, with a unit floor on
/// the scale so that near-zero exact values compare absolutely.
pub fn rel_error_inf(approx: &[f64], exact: &[f64]) -> f64 {
    assert_eq!(approx.len(), exact.len());
    let scale = exact
        .iter()
        .fold(1.0f64, |m, x| m.max(x.abs()));
    approx
        .iter()
        .zip(exact)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max)
        / scale
}
