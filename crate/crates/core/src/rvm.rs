//! Homoscedastic relevance vector machine trained by sequential
//! sparsity/quality basis selection, plus the diagonal-noise marginal
//! likelihood machinery shared with the heteroscedastic trainers.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{HrvmError, Result};
use crate::model::{
    build_design_matrix, eval_basis, standardize, BasisFunction, Dataset, DesignMatrix, KernelSpec,
    Standardization,
};
use crate::numerics::Cholesky;

const LN_2PI: f64 = 1.8378770664093453;

/// Weight posterior and log evidence for a fixed active set, precisions and
/// per-point noise precisions `beta`.
#[derive(Debug, Clone)]
pub(crate) struct SparsePosterior {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    /// `log N(y | 0, B⁻¹ + Φ A⁻¹ Φᵀ)`.
    pub log_marginal: f64,
}

pub(crate) fn sparse_posterior(
    phi: &DMatrix<f64>,
    active: &[usize],
    alpha: &[f64],
    beta: &DVector<f64>,
    y: &DVector<f64>,
) -> Result<SparsePosterior> {
    let n = y.len();
    let m = active.len();
    let sum_ln_beta: f64 = beta.iter().map(|b| b.ln()).sum();
    if m == 0 {
        let quad: f64 = y.iter().zip(beta.iter()).map(|(v, b)| b * v * v).sum();
        return Ok(SparsePosterior {
            mu: DVector::zeros(0),
            sigma: DMatrix::zeros(0, 0),
            log_marginal: -0.5 * (n as f64 * LN_2PI - sum_ln_beta + quad),
        });
    }
    let pa = phi.select_columns(active);
    let mut weighted = pa.clone();
    for (i, mut row) in weighted.row_iter_mut().enumerate() {
        row *= beta[i];
    }
    let mut h = pa.transpose() * &weighted;
    for (j, a) in alpha.iter().enumerate() {
        h[(j, j)] += a;
    }
    // Jacobi scaling keeps the factorization usable across wide α ranges
    let d = h.diagonal().map(f64::sqrt);
    let hs = DMatrix::from_fn(m, m, |i, j| h[(i, j)] / (d[i] * d[j]));
    let chol = Cholesky::new(&hs)?;
    let b = weighted.transpose() * y;
    let mu = chol.solve_vec(&b.component_div(&d)).component_div(&d);
    let inv = chol.inverse();
    let sigma = DMatrix::from_fn(m, m, |i, j| inv[(i, j)] / (d[i] * d[j]));
    let resid = y - &pa * &mu;
    let quad: f64 = resid
        .iter()
        .zip(beta.iter())
        .map(|(r, bb)| bb * r * r)
        .sum::<f64>()
        + mu.iter().zip(alpha).map(|(w, a)| a * w * w).sum::<f64>();
    let sum_ln_alpha: f64 = alpha.iter().map(|a| a.ln()).sum();
    let logdet_c =
        chol.logdet() + 2.0 * d.iter().map(|v| v.ln()).sum::<f64>() - sum_ln_alpha - sum_ln_beta;
    Ok(SparsePosterior {
        mu,
        sigma,
        log_marginal: -0.5 * (n as f64 * LN_2PI + logdet_c + quad),
    })
}

/// Raw `(S_j, Q_j)`: `φⱼᵀC⁻¹φⱼ` and `φⱼᵀC⁻¹y` with `C` the full current covariance.
fn raw_sparsity_quality(
    phi: &DMatrix<f64>,
    active: &[usize],
    post: &SparsePosterior,
    beta: &DVector<f64>,
    y: &DVector<f64>,
    j: usize,
) -> (f64, f64) {
    let col = phi.column(j);
    let bphi = col.component_mul(beta);
    let s_full = bphi.dot(&col);
    let q_full = bphi.dot(y);
    if active.is_empty() {
        return (s_full, q_full);
    }
    let v = DVector::from_iterator(
        active.len(),
        active.iter().map(|&k| phi.column(k).dot(&bphi)),
    );
    (
        s_full - v.dot(&(&post.sigma * &v)),
        q_full - v.dot(&post.mu),
    )
}

/// Turns full-model `(S, Q)` into leave-one-out `(s, q)` for an active basis.
fn leave_one_out(s_full: f64, q_full: f64, alpha: Option<f64>) -> (f64, f64) {
    match alpha {
        Some(a) => {
            let d = a - s_full;
            (a * s_full / d, a * q_full / d)
        }
        None => (s_full, q_full),
    }
}

/// Mutable trainer state for coordinate-wise evidence maximization.
#[derive(Debug, Clone)]
pub(crate) struct SparseBayes<'a> {
    pub phi: &'a DMatrix<f64>,
    pub y: &'a DVector<f64>,
    pub beta: DVector<f64>,
    pub active: Vec<usize>,
    pub alpha: Vec<f64>,
    pub post: SparsePosterior,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum BasisAction {
    None,
    Added,
    Reestimated,
    Deleted,
}

impl<'a> SparseBayes<'a> {
    pub fn new(
        phi: &'a DMatrix<f64>,
        y: &'a DVector<f64>,
        beta: DVector<f64>,
        active: Vec<usize>,
        alpha: Vec<f64>,
    ) -> Result<Self> {
        let post = sparse_posterior(phi, &active, &alpha, &beta, y)?;
        Ok(SparseBayes {
            phi,
            y,
            beta,
            active,
            alpha,
            post,
        })
    }

    pub fn position(&self, j: usize) -> Option<usize> {
        self.active.iter().position(|&k| k == j)
    }

    /// Leave-one-out sparsity and quality of column `j`.
    pub fn sparsity_quality(&self, j: usize) -> (f64, f64) {
        let (s, q) =
            raw_sparsity_quality(self.phi, &self.active, &self.post, &self.beta, self.y, j);
        leave_one_out(s, q, self.position(j).map(|p| self.alpha[p]))
    }

    fn try_commit(&mut self, active: Vec<usize>, alpha: Vec<f64>) -> Result<bool> {
        let post = match sparse_posterior(self.phi, &active, &alpha, &self.beta, self.y) {
            Ok(p) => p,
            // a candidate that breaks the factorization is simply not taken
            Err(HrvmError::NotPositiveDefinite { .. }) => return Ok(false),
            Err(e) => return Err(e),
        };
        let l0 = self.post.log_marginal;
        if post.log_marginal >= l0 - 1e-12 * (1.0 + l0.abs()) {
            self.active = active;
            self.alpha = alpha;
            self.post = post;
            Ok(true)
        } else {
            Ok(false)
        }
    }

    /// Applies the evidence-maximizing action for basis `j` with the other
    /// precisions held fixed. `keep_one` forbids emptying the active set.
    /// Returns the action and the change in `ln α_j` (∞ for add/delete).
    pub fn optimize_basis(
        &mut self,
        j: usize,
        alpha_threshold: f64,
        keep_one: bool,
    ) -> Result<(BasisAction, f64)> {
        let (s, q) = self.sparsity_quality(j);
        let theta = q * q - s;
        let pos = self.position(j);
        let target = if theta > 0.0 {
            s * s / theta
        } else {
            f64::INFINITY
        };
        match pos {
            Some(p) => {
                if !(target <= alpha_threshold) {
                    if keep_one && self.active.len() == 1 {
                        return Ok((BasisAction::None, 0.0));
                    }
                    let mut active = self.active.clone();
                    let mut alpha = self.alpha.clone();
                    active.remove(p);
                    alpha.remove(p);
                    if self.try_commit(active, alpha)? {
                        return Ok((BasisAction::Deleted, f64::INFINITY));
                    }
                    Ok((BasisAction::None, 0.0))
                } else {
                    let change = (target.ln() - self.alpha[p].ln()).abs();
                    if change < 1e-12 {
                        return Ok((BasisAction::None, change));
                    }
                    let active = self.active.clone();
                    let mut alpha = self.alpha.clone();
                    alpha[p] = target;
                    if self.try_commit(active, alpha)? {
                        return Ok((BasisAction::Reestimated, change));
                    }
                    Ok((BasisAction::None, 0.0))
                }
            }
            None => {
                if target <= alpha_threshold {
                    let mut active = self.active.clone();
                    let mut alpha = self.alpha.clone();
                    active.push(j);
                    alpha.push(target);
                    if self.try_commit(active, alpha)? {
                        return Ok((BasisAction::Added, f64::INFINITY));
                    }
                }
                Ok((BasisAction::None, 0.0))
            }
        }
    }

    /// One cyclic pass over every column.
    pub fn sweep(&mut self, alpha_threshold: f64, keep_one: bool) -> Result<SweepSummary> {
        let mut summary = SweepSummary::default();
        for j in 0..self.phi.ncols() {
            let (action, change) = self.optimize_basis(j, alpha_threshold, keep_one)?;
            match action {
                BasisAction::Added => summary.added += 1,
                BasisAction::Deleted => summary.deleted += 1,
                BasisAction::Reestimated => {
                    summary.max_log_alpha_change = summary.max_log_alpha_change.max(change)
                }
                BasisAction::None => {}
            }
        }
        Ok(summary)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub(crate) struct SweepSummary {
    pub added: usize,
    pub deleted: usize,
    pub max_log_alpha_change: f64,
}

/// `(s_j, q_j)` for column `j` of the design matrix under a homoscedastic
/// model state (noise variance `state.sigma2`).
pub fn sparsity_quality(
    phi: &DesignMatrix,
    y: &DVector<f64>,
    state: &RvmModel,
    j: usize,
) -> Result<(f64, f64)> {
    if j >= phi.m() {
        return Err(HrvmError::InvalidParameter(format!(
            "basis index {j} out of range (M = {})",
            phi.m()
        )));
    }
    let beta = DVector::from_element(y.len(), 1.0 / state.sigma2);
    let sb = SparseBayes::new(
        &phi.values,
        y,
        beta,
        state.active_indices.clone(),
        state.alpha.clone(),
    )?;
    let (s, q) = sb.sparsity_quality(j);
    if !s.is_finite() || !q.is_finite() || !(s > 0.0) {
        return Err(HrvmError::Numeric(format!(
            "sparsity/quality for basis {j} is ({s}, {q})"
        )));
    }
    Ok((s, q))
}

/// Homoscedastic weight posterior `Σ = (A + σ⁻²ΦᵀΦ)⁻¹`, `μ = σ⁻²ΣΦᵀy`.
pub fn posterior_moments(
    phi_active: &DMatrix<f64>,
    alpha: &[f64],
    sigma2: f64,
    y: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let m = phi_active.ncols();
    let mut h = phi_active.transpose() * phi_active / sigma2;
    for j in 0..m {
        h[(j, j)] += alpha[j];
    }
    let chol = nalgebra::Cholesky::new(h).ok_or(HrvmError::NotPositiveDefinite { pivot: 0 })?;
    let sigma = chol.inverse();
    let mu = &sigma * (phi_active.transpose() * y) / sigma2;
    Ok((mu, sigma))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RvmConfig {
    pub max_iter: usize,
    pub tol: f64,
    pub alpha_threshold: f64,
    pub standardize: bool,
    pub learn_noise: bool,
}

impl Default for RvmConfig {
    fn default() -> Self {
        RvmConfig {
            max_iter: 300,
            tol: 1e-6,
            alpha_threshold: 1e12,
            standardize: true,
            learn_noise: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitStatus {
    Converged,
    MaxIter,
    Stalled,
    Oscillating,
}

/// Trained homoscedastic RVM.
#[derive(Debug, Clone, PartialEq)]
pub struct RvmModel {
    /// Columns of the training design matrix kept in the model.
    pub active_indices: Vec<usize>,
    pub alpha: Vec<f64>,
    pub sigma2: f64,
    pub mu_w: DVector<f64>,
    pub sigma_w: DMatrix<f64>,
    pub kernel: KernelSpec,
    pub basis: Vec<BasisFunction>,
    pub standardization: Standardization,
    /// Log marginal likelihood after each sweep (standardized units).
    pub training_log: Vec<f64>,
    pub status: FitStatus,
}

impl RvmModel {
    pub fn log_marginal(&self) -> f64 {
        self.training_log.last().copied().unwrap_or(f64::NAN)
    }
}

/// Fits the baseline by cyclic sparsity/quality basis selection.
pub fn fit_rvm(data: &Dataset, kernel: &KernelSpec, config: &RvmConfig) -> Result<RvmModel> {
    if data.n() < 2 {
        return Err(HrvmError::Data(format!(
            "fit_rvm needs at least 2 points, got {}",
            data.n()
        )));
    }
    let (train, record) = if config.standardize {
        let (d, r) = standardize(data);
        (d, r)
    } else {
        (data.clone(), Standardization::identity(data.q()))
    };
    let design = build_design_matrix(&train, kernel)?;
    let y = &train.y;
    let n = y.len() as f64;
    let y_var = y.iter().map(|v| v * v).sum::<f64>() / n - (y.sum() / n).powi(2);

    if !(y_var > 1e-300) {
        // constant targets: bias-only model
        let (active, alpha) = if kernel.include_bias {
            (vec![0], vec![1.0])
        } else {
            (vec![], vec![])
        };
        let sigma2 = 1e-6;
        let beta = DVector::from_element(y.len(), 1.0 / sigma2);
        let post = sparse_posterior(&design.values, &active, &alpha, &beta, y)?;
        return Ok(assemble(
            design,
            active,
            alpha,
            sigma2,
            post,
            record,
            vec![],
            FitStatus::Converged,
        ));
    }

    let mut sigma2 = 0.1 * y_var;
    let beta = DVector::from_element(y.len(), 1.0 / sigma2);

    // start from the column with the largest normalized projection onto y
    let mut best = None;
    for j in 0..design.m() {
        let col = design.values.column(j);
        let nn = col.norm_squared();
        if nn <= 0.0 {
            continue;
        }
        let proj = col.dot(y).powi(2) / nn;
        if best.is_none_or(|(_, p)| proj > p) {
            best = Some((j, proj));
        }
    }
    let (mut active, mut alpha) = (vec![], vec![]);
    if let Some((j, _)) = best {
        let col = design.values.column(j);
        let s = col.norm_squared() / sigma2;
        let q = col.dot(y) / sigma2;
        if q * q > s {
            active.push(j);
            alpha.push(s * s / (q * q - s));
        }
    }

    let mut sb = SparseBayes::new(&design.values, y, beta, active, alpha)?;
    let mut log = vec![sb.post.log_marginal];
    let mut status = FitStatus::MaxIter;
    for _ in 0..config.max_iter {
        let summary = sb.sweep(config.alpha_threshold, false)?;
        let mut noise_change = 0.0;
        if config.learn_noise {
            let gamma: f64 = sb
                .alpha
                .iter()
                .enumerate()
                .map(|(k, a)| 1.0 - a * sb.post.sigma[(k, k)])
                .sum();
            let pa = design.values.select_columns(&sb.active);
            let resid = if sb.active.is_empty() {
                y.clone()
            } else {
                y - &pa * &sb.post.mu
            };
            let denom = n - gamma;
            if denom > 0.0 {
                let target = (resid.norm_squared() / denom).max(1e-10 * y_var);
                // backtrack in log space until the evidence does not drop
                let mut t = 1.0;
                for _ in 0..12 {
                    let candidate = (sigma2.ln() + t * (target.ln() - sigma2.ln())).exp();
                    let beta = DVector::from_element(y.len(), 1.0 / candidate);
                    let post = sparse_posterior(&design.values, &sb.active, &sb.alpha, &beta, y)?;
                    if post.log_marginal >= sb.post.log_marginal {
                        noise_change = (candidate.ln() - sigma2.ln()).abs();
                        sigma2 = candidate;
                        sb.beta = beta;
                        sb.post = post;
                        break;
                    }
                    t *= 0.5;
                }
            }
        }
        log.push(sb.post.log_marginal);
        if summary.added == 0
            && summary.deleted == 0
            && summary.max_log_alpha_change < config.tol
            && noise_change < config.tol
        {
            status = FitStatus::Converged;
            break;
        }
    }
    let SparseBayes {
        active,
        alpha,
        post,
        ..
    } = sb;
    Ok(assemble(
        design, active, alpha, sigma2, post, record, log, status,
    ))
}

#[allow(clippy::too_many_arguments)]
fn assemble(
    design: DesignMatrix,
    active: Vec<usize>,
    alpha: Vec<f64>,
    sigma2: f64,
    post: SparsePosterior,
    record: Standardization,
    training_log: Vec<f64>,
    status: FitStatus,
) -> RvmModel {
    let basis = active.iter().map(|&j| design.basis[j].clone()).collect();
    let training_log = if training_log.is_empty() {
        vec![post.log_marginal]
    } else {
        training_log
    };
    RvmModel {
        active_indices: active,
        alpha,
        sigma2,
        mu_w: post.mu,
        sigma_w: post.sigma,
        kernel: design.kernel,
        basis,
        standardization: record,
        training_log,
        status,
    }
}

/// Predictive mean and variance in original units.
pub fn rvm_predict(
    model: &RvmModel,
    x_star: &DMatrix<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let xs = model.standardization.apply_x(x_star)?;
    let phi = eval_basis(&model.kernel, &model.basis, &xs);
    let mean = if model.basis.is_empty() {
        DVector::zeros(xs.nrows())
    } else {
        &phi * &model.mu_w
    };
    let var = DVector::from_iterator(
        xs.nrows(),
        (0..xs.nrows()).map(|i| {
            let row = phi.row(i);
            let latent = if model.basis.is_empty() {
                0.0
            } else {
                (row * &model.sigma_w).dot(&row)
            };
            model.sigma2 + latent.max(0.0)
        }),
    );
    let st = &model.standardization;
    Ok((st.invert_y(&mean), var * (st.y_scale * st.y_scale)))
}
