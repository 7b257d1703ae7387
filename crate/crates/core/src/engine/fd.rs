// SPDX-License-Identifier: MIT OR Apache-2.0

//! Central finite differences, used as the independent oracle for every
//! reverse-mode gradient in the crate.

use super::{EngineError, Tape, Tensor, Var};

/// `max_k |analytic_k - numeric_k| / max(1, |analytic_k|)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Central-difference estimate of the gradient of `f` at `point`, restricted
/// to the flat coordinates in `coords`.
pub fn central_difference_at<E, F>(f: F, point: &Tensor, eps: f64, coords: &[usize]) -> Result<Vec<f64>, E>
where
    F: Fn(&Tensor) -> Result<f64, E>,
    E: From<EngineError>,
{
    let mut probe = point.clone();
    let mut out = Vec::with_capacity(coords.len());
    for &k in coords {
        let x0 = point.data()[k];
        probe.data_mut()[k] = x0 + eps;
        let up = f(&probe)?;
        probe.data_mut()[k] = x0 - eps;
        let down = f(&probe)?;
        probe.data_mut()[k] = x0;
        if !up.is_finite() || !down.is_finite() {
            return Err(EngineError::NonFiniteProbe { index: k }.into());
        }
        out.push((up - down) / (2.0 * eps));
    }
    Ok(out)
}

/// Central-difference gradient of `f` over every coordinate of `point`.
pub fn central_difference<E, F>(f: F, point: &Tensor, eps: f64) -> Result<Tensor, E>
where
    F: Fn(&Tensor) -> Result<f64, E>,
    E: From<EngineError>,
{
    let coords: Vec<usize> = (0..point.len()).collect();
    let data = central_difference_at(f, point, eps, &coords)?;
    Ok(Tensor::new(point.rows(), point.cols(), data))
}

/// Compares the reverse-mode gradient of a scalar program of one leaf
/// against central differences and returns the maximum relative error.
pub fn finite_diff_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64, EngineError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, EngineError>,
{
    let mut tape = Tape::new();
    let x = tape.leaf("x", point.clone())?;
    let root = f(&mut tape, x)?;
    let analytic = tape.backward(root)?.remove("x").expect("leaf x registered");

    let numeric = central_difference(
        |p: &Tensor| -> Result<f64, EngineError> {
            let mut t = Tape::new();
            let x = t.leaf("x", p.clone())?;
            let r = f(&mut t, x)?;
            Ok(t.value(r).item())
        },
        point,
        eps,
    )?;
    Ok(max_relative_error(analytic.data(), numeric.data()))
}
