//! Finite-difference gradient verification.
//!
//! Central differences over a flat parameter vector; independent of the tape,
//! so it can sit on the other side of any analytic-vs-numeric comparison.

/// Central finite-difference gradient of `f` at `point`.
pub fn numerical_gradient<F>(mut f: F, point: &[f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = point.to_vec();
    let mut grad = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        probe[i] = point[i] + step;
        let plus = f(&probe);
        probe[i] = point[i] - step;
        let minus = f(&probe);
        probe[i] = point[i];
        grad.push((plus - minus) / (2.0 * step));
    }
    grad
}

/// Guarded relative error between two gradient vectors.
///
/// Per component: `|a-n| / max(|a|,|n|)` when either magnitude exceeds
/// `abs_floor`, else the raw absolute difference. Returns the maximum.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], abs_floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| {
            let mag = a.abs().max(n.abs());
            let diff = (a - n).abs();
            if mag > abs_floor {
                diff / mag
            } else {
                diff
            }
        })
        .fold(0.0, f64::max)
}
