use crate::error::{HrvmError, Result};

/// Compares an analytic gradient against central differences.
///
/// Step `hᵢ = 1e-5 (1 + |xᵢ|)`; the per-coordinate error is
/// `|analytic − numeric| / max(1, |analytic|, |numeric|)` and the maximum is
/// returned.
pub fn grad_check<F, G>(f: F, grad: G, x: &[f64]) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    let analytic = grad(x);
    if analytic.len() != x.len() {
        return Err(HrvmError::Dimension(format!(
            "gradient has {} entries for {} coordinates",
            analytic.len(),
            x.len()
        )));
    }
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let h = 1e-5 * (1.0 + x[i].abs());
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(HrvmError::NonFinite(format!(
                "objective at coordinate {i} (+h: {up}, -h: {down})"
            )));
        }
        if !analytic[i].is_finite() {
            return Err(HrvmError::NonFinite(format!(
                "analytic gradient coordinate {i}"
            )));
        }
        let numeric = (up - down) / (2.0 * h);
        let scale = 1f64.max(analytic[i].abs()).max(numeric.abs());
        worst = worst.max((analytic[i] - numeric).abs() / scale);
    }
    Ok(worst)
}
