use nalgebra::{DMatrix, DVector};

use super::linalg::Cholesky;
use crate::error::{HrvmError, Result};

/// `KL(N(mu_q, sigma_q) ‖ N(mu_p, sigma_p))`.
pub fn gauss_kl(
    mu_q: &DVector<f64>,
    sigma_q: &DMatrix<f64>,
    mu_p: &DVector<f64>,
    sigma_p: &DMatrix<f64>,
) -> Result<f64> {
    let n = mu_q.len();
    if mu_p.len() != n || sigma_q.shape() != (n, n) || sigma_p.shape() != (n, n) {
        return Err(HrvmError::Dimension(format!(
            "gauss_kl: means {} / {}, covariances {:?} / {:?}",
            n,
            mu_p.len(),
            sigma_q.shape(),
            sigma_p.shape()
        )));
    }
    let chol_p = Cholesky::new(sigma_p)?;
    let chol_q = Cholesky::new(sigma_q)?;
    // tr(Σp⁻¹ Σq) = ‖Lp⁻¹ Lq‖²_F
    let m = chol_p.solve_lower(chol_q.l());
    let trace = m.norm_squared();
    let diff = mu_p - mu_q;
    let maha = chol_p.solve_lower_vec(&diff).norm_squared();
    let kl = 0.5 * (trace + maha - n as f64 + chol_p.logdet() - chol_q.logdet());
    debug_assert!(kl > -1e-10, "negative KL {kl}");
    Ok(kl.max(0.0))
}
