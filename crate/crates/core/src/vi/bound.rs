//! The collapsed variational bound over `q(g)` and its gradients.
//!
//! `q(g) = N(μ, Σ)` is parameterized through the diagonal `Λ`:
//! `Σ = (K_g⁻¹ + Λ)⁻¹`, `μ = K_g(Λ − ½I)𝟙 + μ0𝟙`. All evaluations go through
//! the well-conditioned `B = I + Λ^½ K_g Λ^½`; `K_g⁻¹` is never formed.

use nalgebra::{DMatrix, DVector};

use crate::error::{HrvmError, Result};
use crate::model::GpNoisePrior;
use crate::numerics::Cholesky;
use crate::rvm::{sparse_posterior, SparsePosterior};

const LN_2PI: f64 = 1.8378770664093453;

/// Diagonal effective noise `Rₙₙ = exp(μₙ − Σₙₙ/2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RMatrix {
    pub diagonal: DVector<f64>,
}

impl RMatrix {
    pub fn precisions(&self) -> DVector<f64> {
        self.diagonal.map(|r| 1.0 / r)
    }
}

pub(crate) fn r_from_diag(mu: &DVector<f64>, sigma_diag: &DVector<f64>) -> Result<RMatrix> {
    let diagonal = DVector::from_iterator(
        mu.len(),
        mu.iter()
            .zip(sigma_diag.iter())
            .map(|(m, s)| (m - 0.5 * s).exp()),
    );
    if let Some(i) = diagonal.iter().position(|r| !r.is_finite() || !(*r > 0.0)) {
        return Err(HrvmError::NonFinite(format!("R[{i}] = {}", diagonal[i])));
    }
    Ok(RMatrix { diagonal })
}

/// `Rₙₙ = exp(μₙ − Σₙₙ/2)`.
pub fn compute_r(mu: &DVector<f64>, sigma: &DMatrix<f64>) -> Result<RMatrix> {
    if sigma.shape() != (mu.len(), mu.len()) {
        return Err(HrvmError::Dimension(format!(
            "mean of length {} with covariance {:?}",
            mu.len(),
            sigma.shape()
        )));
    }
    r_from_diag(mu, &sigma.diagonal())
}

/// `E_{q(g)}[log p(y | w, g)] = log N(y | Φw, R) − ¼ tr(Σ)` for noise
/// variance `e^{gₙ}`.
pub fn expected_loglik(
    y: &DVector<f64>,
    w: &DVector<f64>,
    phi: &DMatrix<f64>,
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
) -> Result<f64> {
    if phi.nrows() != y.len() || phi.ncols() != w.len() {
        return Err(HrvmError::Dimension(format!(
            "Φ is {:?}, y has {}, w has {}",
            phi.shape(),
            y.len(),
            w.len()
        )));
    }
    let r = compute_r(mu, sigma)?;
    let f = phi * w;
    let mut total = 0.0;
    for n in 0..y.len() {
        let rn = r.diagonal[n];
        let e = y[n] - f[n];
        total += -0.5 * (LN_2PI + rn.ln() + e * e / rn);
    }
    let value = total - 0.25 * sigma.trace();
    if !value.is_finite() {
        return Err(HrvmError::NonFinite("expected log-likelihood".into()));
    }
    Ok(value)
}

/// Moments of `q*(w) = N(μ_w, Σ_w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightPosterior {
    pub mu_w: DVector<f64>,
    pub sigma_w: DMatrix<f64>,
}

/// `Σ_w = (A + ΦᵀR⁻¹Φ)⁻¹`, `μ_w = Σ_wΦᵀR⁻¹y` over the columns of `phi`.
pub fn qw_posterior(
    phi: &DMatrix<f64>,
    alpha: &[f64],
    r: &RMatrix,
    y: &DVector<f64>,
) -> Result<WeightPosterior> {
    if alpha.len() != phi.ncols() || r.diagonal.len() != phi.nrows() || y.len() != phi.nrows() {
        return Err(HrvmError::Dimension(format!(
            "Φ is {:?} with {} precisions, {} noise entries, {} targets",
            phi.shape(),
            alpha.len(),
            r.diagonal.len(),
            y.len()
        )));
    }
    if alpha.iter().any(|a| !(*a > 0.0)) {
        return Err(HrvmError::InvalidParameter(
            "weight precisions must be positive".into(),
        ));
    }
    let all: Vec<usize> = (0..phi.ncols()).collect();
    let post = sparse_posterior(phi, &all, alpha, &r.precisions(), y)?;
    Ok(WeightPosterior {
        mu_w: post.mu,
        sigma_w: post.sigma,
    })
}

/// Current variational parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalState {
    /// Standardized training inputs the g-process lives on.
    pub inputs: DMatrix<f64>,
    pub lambda: DVector<f64>,
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub alpha: Vec<f64>,
    /// Columns of the full design matrix that `alpha` refers to.
    pub active: Vec<usize>,
    pub prior: GpNoisePrior,
}

impl VariationalState {
    /// Builds a state with moments derived from `lambda`.
    pub fn new(
        inputs: DMatrix<f64>,
        lambda: DVector<f64>,
        alpha: Vec<f64>,
        active: Vec<usize>,
        prior: GpNoisePrior,
    ) -> Result<Self> {
        let (mu, sigma) = lambda_to_moments(&lambda, &prior, &inputs)?;
        Ok(VariationalState {
            inputs,
            lambda,
            mu,
            sigma,
            alpha,
            active,
            prior,
        })
    }

    pub fn r(&self) -> Result<RMatrix> {
        compute_r(&self.mu, &self.sigma)
    }
}

fn check_lambda(lambda: &DVector<f64>, n: usize) -> Result<()> {
    if lambda.len() != n {
        return Err(HrvmError::Dimension(format!(
            "Λ has {} entries for {} points",
            lambda.len(),
            n
        )));
    }
    if let Some(i) = lambda.iter().position(|l| !(*l > 0.0) || !l.is_finite()) {
        return Err(HrvmError::InvalidParameter(format!(
            "Λ[{i}] = {} must be positive and finite",
            lambda[i]
        )));
    }
    Ok(())
}

/// Intermediate quantities of the `Λ` parameterization.
struct LambdaForm {
    k: DMatrix<f64>,
    sqrt_lambda: DVector<f64>,
    b_chol: Cholesky,
    /// `a = λ − ½`, so that `μ − μ0𝟙 = K_g a`.
    a: DVector<f64>,
    mu: DVector<f64>,
    sigma: DMatrix<f64>,
}

fn lambda_form(
    lambda: &DVector<f64>,
    prior: &GpNoisePrior,
    x: &DMatrix<f64>,
) -> Result<LambdaForm> {
    let n = x.nrows();
    check_lambda(lambda, n)?;
    let k = prior.covariance_unchecked(x);
    let sqrt_lambda = lambda.map(f64::sqrt);
    // B = I + L K L
    let mut b = k.clone();
    for i in 0..n {
        for j in 0..n {
            b[(i, j)] *= sqrt_lambda[i] * sqrt_lambda[j];
        }
        b[(i, i)] += 1.0;
    }
    let b_chol = Cholesky::new(&b)?;
    // V = L_B⁻¹ L K, Σ = K − VᵀV
    let mut lk = k.clone();
    for (i, mut row) in lk.row_iter_mut().enumerate() {
        row *= sqrt_lambda[i];
    }
    let v = b_chol.solve_lower(&lk);
    let sigma = crate::numerics::linalg::symmetrize(&k - v.transpose() * &v);
    let a = lambda.map(|l| l - 0.5);
    let mu = &k * &a + DVector::from_element(n, prior.mu0);
    Ok(LambdaForm {
        k,
        sqrt_lambda,
        b_chol,
        a,
        mu,
        sigma,
    })
}

/// `Σ = (K_g⁻¹ + Λ)⁻¹` and `μ = K_g(Λ − ½I)𝟙 + μ0𝟙`.
pub fn lambda_to_moments(
    lambda: &DVector<f64>,
    prior: &GpNoisePrior,
    x: &DMatrix<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let form = lambda_form(lambda, prior, x)?;
    Ok((form.mu, form.sigma))
}

/// `KL(N(μ,Σ) ‖ N(μ0𝟙, K))` in the `Λ` form: `½[tr B⁻¹ + aᵀKa − N + log|B|]`.
fn kl_lambda_form(form: &LambdaForm) -> f64 {
    let n = form.a.len();
    let binv_l = form.b_chol.solve_lower(&DMatrix::identity(n, n));
    let trace = binv_l.norm_squared();
    let quad = form.a.dot(&(&form.k * &form.a));
    0.5 * (trace + quad - n as f64 + form.b_chol.logdet())
}

/// Value and pieces of the collapsed bound.
#[derive(Debug, Clone)]
pub struct BoundTerms {
    /// `log N(y | 0, ΦA⁻¹Φᵀ + R)`.
    pub data_fit: f64,
    /// `¼ tr Σ`.
    pub trace_penalty: f64,
    pub kl: f64,
    pub value: f64,
}

/// Parameters the quasi-Newton step moves: `Λ = softplus(η)`, log
/// lengthscale and log signal variance of `K_g`, and `μ0`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundParams {
    pub eta: DVector<f64>,
    pub log_lengthscale: f64,
    pub log_signal_variance: f64,
    pub mu0: f64,
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl BoundParams {
    pub fn from_state(state: &VariationalState) -> Self {
        BoundParams {
            eta: state.lambda.map(softplus_inv),
            log_lengthscale: state.prior.kernel.lengthscale.ln(),
            log_signal_variance: state.prior.kernel.signal_variance.ln(),
            mu0: state.prior.mu0,
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.eta.iter().copied().collect();
        v.extend([self.log_lengthscale, self.log_signal_variance, self.mu0]);
        v
    }

    pub fn from_slice(v: &[f64]) -> Self {
        let n = v.len() - 3;
        BoundParams {
            eta: DVector::from_column_slice(&v[..n]),
            log_lengthscale: v[n],
            log_signal_variance: v[n + 1],
            mu0: v[n + 2],
        }
    }

    pub fn lambda(&self) -> DVector<f64> {
        self.eta.map(softplus)
    }

    /// A copy of `base` with this lengthscale, signal variance and mean.
    pub fn prior(&self, base: &GpNoisePrior) -> GpNoisePrior {
        let mut p = base.clone();
        p.kernel.lengthscale = self.log_lengthscale.exp();
        p.kernel.signal_variance = self.log_signal_variance.exp();
        p.mu0 = self.mu0;
        p
    }
}

/// Gradient with respect to [`BoundParams`], in the same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundGradient {
    pub eta: DVector<f64>,
    pub log_lengthscale: f64,
    pub log_signal_variance: f64,
    pub mu0: f64,
}

impl BoundGradient {
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.eta.iter().copied().collect();
        v.extend([self.log_lengthscale, self.log_signal_variance, self.mu0]);
        v
    }

    pub fn norm(&self) -> f64 {
        self.to_vec().iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

/// Everything one bound evaluation produces.
pub(crate) struct BoundEval {
    pub terms: BoundTerms,
    pub gradient: Option<BoundGradient>,
}

/// Evaluates the collapsed bound at `(Λ, prior)` for the active columns
/// of `phi`, optionally with the full gradient.
#[allow(clippy::too_many_arguments)]
pub(crate) fn evaluate(
    x: &DMatrix<f64>,
    phi: &DMatrix<f64>,
    active: &[usize],
    alpha: &[f64],
    y: &DVector<f64>,
    prior: &GpNoisePrior,
    lambda: &DVector<f64>,
    with_gradient: bool,
) -> Result<BoundEval> {
    let n = x.nrows();
    let form = lambda_form(lambda, prior, x)?;
    let sdiag = form.sigma.diagonal();
    let r = r_from_diag(&form.mu, &sdiag)?;
    let beta = r.precisions();
    let weights = sparse_posterior(phi, active, alpha, &beta, y)?;
    let kl = kl_lambda_form(&form);
    let trace_penalty = 0.25 * sdiag.sum();
    let value = weights.log_marginal - trace_penalty - kl;
    if !value.is_finite() {
        return Err(HrvmError::NonFinite("collapsed bound".into()));
    }
    let terms = BoundTerms {
        data_fit: weights.log_marginal,
        trace_penalty,
        kl,
        value,
    };

    let gradient = if with_gradient {
        // dD/dμₙ = ½(m̂ₙ/Rₙ − 1), m̂ₙ = E_q(w)[(yₙ − Φₙw)²]
        let m_hat = expected_sq_residual(phi, active, &weights, y);
        let dmu = DVector::from_iterator(n, (0..n).map(|i| 0.5 * (m_hat[i] * beta[i] - 1.0)));
        let diff = &dmu - &form.a;
        let sig2 = form.sigma.component_mul(&form.sigma);
        let dlambda = &form.k * &diff + 0.5 * (&sig2 * &diff);
        let eta_grad = DVector::from_iterator(
            n,
            lambda
                .iter()
                .zip(dlambda.iter())
                .map(|(l, g)| g * sigmoid(softplus_inv(*l))),
        );
        let dmu0 = dmu.sum();

        // dF = tr(X dK) with
        // X = a·dμᵀ − P C Pᵀ − ½(−P P Λ + a aᵀ + P Λ), C = diag(½dμ + ¼),
        // P = (I + ΛK)⁻¹ = I − Λ^½ B⁻¹ Λ^½ K
        let mut lk = form.k.clone();
        for (i, mut row) in lk.row_iter_mut().enumerate() {
            row *= form.sqrt_lambda[i];
        }
        let m = form.b_chol.solve(&lk);
        let mut p = -m;
        for (i, mut row) in p.row_iter_mut().enumerate() {
            row *= form.sqrt_lambda[i];
        }
        for i in 0..n {
            p[(i, i)] += 1.0;
        }
        let c = dmu.map(|d| 0.5 * d + 0.25);
        let mut pc = p.clone();
        for (j, mut col) in pc.column_iter_mut().enumerate() {
            col *= c[j];
        }
        let pcpt = &pc * p.transpose();
        let mut p_lam = p.clone();
        for (j, mut col) in p_lam.column_iter_mut().enumerate() {
            col *= lambda[j];
        }
        let pp_lam = &p * &p_lam;
        let xmat = &form.a * dmu.transpose()
            - pcpt
            - 0.5 * (p_lam - pp_lam + &form.a * form.a.transpose());

        let dk_ell = prior.covariance_dlog_lengthscale(x);
        let mut dk_sv = form.k.clone();
        for i in 0..n {
            dk_sv[(i, i)] -= prior.jitter;
        }
        let g_ell = xmat.component_mul(&dk_ell.transpose()).sum();
        let g_sv = xmat.component_mul(&dk_sv.transpose()).sum();
        Some(BoundGradient {
            eta: eta_grad,
            log_lengthscale: g_ell,
            log_signal_variance: g_sv,
            mu0: dmu0,
        })
    } else {
        None
    };

    Ok(BoundEval { terms, gradient })
}

/// `m̂ₙ = (yₙ − Φₙμ_w)² + ΦₙΣ_wΦₙᵀ` over the active columns.
pub(crate) fn expected_sq_residual(
    phi: &DMatrix<f64>,
    active: &[usize],
    weights: &SparsePosterior,
    y: &DVector<f64>,
) -> DVector<f64> {
    if active.is_empty() {
        return y.map(|v| v * v);
    }
    let pa = phi.select_columns(active);
    let f = &pa * &weights.mu;
    let ps = &pa * &weights.sigma;
    DVector::from_iterator(
        y.len(),
        (0..y.len()).map(|i| {
            let e = y[i] - f[i];
            e * e + ps.row(i).dot(&pa.row(i)).max(0.0)
        }),
    )
}

/// `F_KL = log N(y | 0, ΦA⁻¹Φᵀ + R) − ¼ tr Σ − KL(N(μ,Σ) ‖ N(μ0𝟙, K_g))`.
pub fn collapsed_bound(
    state: &VariationalState,
    phi: &DMatrix<f64>,
    y: &DVector<f64>,
) -> Result<BoundTerms> {
    Ok(evaluate(
        &state.inputs,
        phi,
        &state.active,
        &state.alpha,
        y,
        &state.prior,
        &state.lambda,
        false,
    )?
    .terms)
}

/// Analytic gradient of the collapsed bound with respect to
/// `(η, log ℓ_g, log σ²_g, μ0)`, `Λ = softplus(η)`.
pub fn bound_gradients(
    state: &VariationalState,
    phi: &DMatrix<f64>,
    y: &DVector<f64>,
) -> Result<BoundGradient> {
    let eval = evaluate(
        &state.inputs,
        phi,
        &state.active,
        &state.alpha,
        y,
        &state.prior,
        &state.lambda,
        true,
    )?;
    let g = eval.gradient.expect("gradient requested");
    if let Some((i, _)) = g.to_vec().iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(HrvmError::NonFinite(format!(
            "bound gradient coordinate {i}"
        )));
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{gauss_hermite, gauss_kl, grad_check};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn r_matrix_examples() {
        let r = compute_r(&DVector::zeros(3), &DMatrix::zeros(3, 3)).unwrap();
        assert_eq!(r.diagonal, DVector::from_element(3, 1.0));
        let r = compute_r(
            &DVector::from_vec(vec![2.0]),
            &DMatrix::from_element(1, 1, 2.0),
        )
        .unwrap();
        assert_abs_diff_eq!(r.diagonal[0], std::f64::consts::E, epsilon = 1e-15);
        let lo = compute_r(
            &DVector::from_vec(vec![0.1]),
            &DMatrix::from_element(1, 1, 0.3),
        )
        .unwrap();
        let hi = compute_r(
            &DVector::from_vec(vec![0.2]),
            &DMatrix::from_element(1, 1, 0.3),
        )
        .unwrap();
        assert!(hi.diagonal[0] > lo.diagonal[0]);
        match compute_r(&DVector::from_vec(vec![0.0, 800.0]), &DMatrix::zeros(2, 2)) {
            Err(HrvmError::NonFinite(msg)) => assert!(msg.contains("R[1]")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn expected_loglik_point_mass_reduces_to_gaussian() {
        let y = DVector::from_vec(vec![0.3, -1.0]);
        let phi = DMatrix::from_row_slice(2, 1, &[1.0, 2.0]);
        let w = DVector::from_vec(vec![0.5]);
        let v = expected_loglik(&y, &w, &phi, &DVector::zeros(2), &DMatrix::zeros(2, 2)).unwrap();
        let f = &phi * &w;
        let direct: f64 = (0..2)
            .map(|i| -0.5 * LN_2PI - 0.5 * (y[i] - f[i]).powi(2))
            .sum();
        assert_abs_diff_eq!(v, direct, epsilon = 1e-14);
    }

    #[test]
    fn expected_loglik_single_point_matches_quadrature() {
        let y = DVector::from_vec(vec![1.0]);
        let phi = DMatrix::from_element(1, 1, 0.0);
        let w = DVector::from_vec(vec![0.0]);
        let v = expected_loglik(
            &y,
            &w,
            &phi,
            &DVector::zeros(1),
            &DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        // −½ln2π − ½(μ − Σ/2) − ½y²e^{−μ+Σ/2} − ¼Σ
        let closed = -0.5 * LN_2PI + 0.25 - 0.5 * 0.5f64.exp() - 0.25;
        let q = gauss_hermite(32).unwrap();
        let quad = q.expect(|g| -0.5 * LN_2PI - 0.5 * g - 0.5 * (-g).exp());
        assert_abs_diff_eq!(v, closed, epsilon = 1e-14);
        assert_abs_diff_eq!(v, quad, epsilon = 1e-8);
        assert_abs_diff_eq!(v, -1.74330, epsilon = 1e-5);
    }

    #[test]
    fn weight_posterior_identity_case() {
        let y = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let r = RMatrix {
            diagonal: DVector::from_element(3, 1.0),
        };
        let post = qw_posterior(&DMatrix::identity(3, 3), &[1.0; 3], &r, &y).unwrap();
        assert!((post.sigma_w - DMatrix::identity(3, 3) * 0.5).amax() < 1e-15);
        assert!((post.mu_w - &y * 0.5).amax() < 1e-15);

        let big = qw_posterior(&DMatrix::identity(3, 3), &[1e14; 3], &r, &y).unwrap();
        assert!(big.mu_w.amax() < 1e-13);

        assert!(qw_posterior(&DMatrix::identity(3, 3), &[1.0, 0.0, 1.0], &r, &y).is_err());
    }

    #[test]
    fn lambda_examples() {
        let prior = GpNoisePrior {
            mu0: 0.7,
            kernel: crate::model::KernelSpec::rbf(1.0),
            jitter: 1e-6,
        };
        let x = DMatrix::from_row_slice(3, 1, &[0.0, 0.4, 1.1]);
        let (mu, _) = lambda_to_moments(&DVector::from_element(3, 0.5), &prior, &x).unwrap();
        assert!(mu.iter().all(|m| (m - 0.7).abs() < 1e-15));

        // far-apart inputs make K ≈ (1 + jitter) I
        let far = DMatrix::from_row_slice(2, 1, &[0.0, 100.0]);
        let mut p = prior.clone();
        p.jitter = 1e-300;
        let (_, sigma) = lambda_to_moments(&DVector::from_element(2, 0.25), &p, &far).unwrap();
        assert_abs_diff_eq!(sigma[(0, 0)], 0.8, epsilon = 1e-14);
        assert_abs_diff_eq!(sigma[(0, 1)], 0.0, epsilon = 1e-14);

        assert!(lambda_to_moments(&DVector::from_vec(vec![0.1, -0.1, 0.2]), &prior, &x).is_err());
        assert!(lambda_to_moments(&DVector::from_vec(vec![0.1, 0.1]), &prior, &x).is_err());
    }

    #[test]
    fn lambda_form_matches_explicit_inverse() {
        let prior = GpNoisePrior::new(-0.3, 0.8, 1.7);
        let x = DMatrix::from_row_slice(4, 1, &[0.0, 0.3, 0.9, 2.0]);
        let lambda = DVector::from_vec(vec![0.2, 0.9, 0.05, 2.0]);
        let (mu, sigma) = lambda_to_moments(&lambda, &prior, &x).unwrap();
        let k = prior.covariance_unchecked(&x);
        let kinv = k.clone().try_inverse().unwrap();
        let explicit = (kinv + DMatrix::from_diagonal(&lambda))
            .try_inverse()
            .unwrap();
        assert!((sigma - explicit).amax() < 1e-9);
        let mu_ref = &k * lambda.map(|l| l - 0.5) + DVector::from_element(4, -0.3);
        assert!((mu - mu_ref).amax() < 1e-13);
    }

    /// Direct dense evaluation of the bound with explicit inverses (N ≤ 4).
    fn dense_bound(state: &VariationalState, phi: &DMatrix<f64>, y: &DVector<f64>) -> f64 {
        let n = y.len();
        let k = state.prior.covariance_unchecked(&state.inputs);
        let sigma = (k.clone().try_inverse().unwrap() + DMatrix::from_diagonal(&state.lambda))
            .try_inverse()
            .unwrap();
        let sigma = crate::numerics::linalg::symmetrize(sigma);
        let mu = &k * state.lambda.map(|l| l - 0.5) + DVector::from_element(n, state.prior.mu0);
        let mut c = DMatrix::from_diagonal(&DVector::from_iterator(
            n,
            (0..n).map(|i| (mu[i] - 0.5 * sigma[(i, i)]).exp()),
        ));
        for (p, &j) in state.active.iter().enumerate() {
            let col = phi.column(j);
            c += col * col.transpose() / state.alpha[p];
        }
        let logn = -0.5
            * (n as f64 * LN_2PI + c.determinant().ln() + y.dot(&(c.try_inverse().unwrap() * y)));
        let kl = gauss_kl(&mu, &sigma, &DVector::from_element(n, state.prior.mu0), &k).unwrap();
        logn - 0.25 * sigma.trace() - kl
    }

    fn random_state(
        rng: &mut ChaCha8Rng,
        n: usize,
    ) -> (VariationalState, DMatrix<f64>, DVector<f64>) {
        let x = DMatrix::from_fn(n, 1, |_, _| rng.random_range(-2.0..2.0));
        let m = n + 1;
        let phi = DMatrix::from_fn(n, m, |i, j| {
            if j == 0 {
                1.0
            } else {
                (-(x[(i, 0)] - x[(j - 1, 0)] as f64).powi(2) / 2.0).exp()
            }
        });
        let y = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
        let lambda = DVector::from_fn(n, |_, _| rng.random_range(0.05..1.5));
        let active: Vec<usize> = (0..m).filter(|_| rng.random_bool(0.6)).collect();
        let alpha = active.iter().map(|_| rng.random_range(0.2..5.0)).collect();
        let prior = GpNoisePrior::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(0.4..2.0),
            rng.random_range(0.3..2.0),
        );
        (
            VariationalState::new(x, lambda, alpha, active, prior).unwrap(),
            phi,
            y,
        )
    }

    #[test]
    fn bound_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for n in 1..=4 {
            for _ in 0..5 {
                let (state, phi, y) = random_state(&mut rng, n);
                let fast = collapsed_bound(&state, &phi, &y).unwrap().value;
                let slow = dense_bound(&state, &phi, &y);
                assert_abs_diff_eq!(fast, slow, epsilon = 1e-8 * (1.0 + slow.abs()));
            }
        }
    }

    #[test]
    fn single_point_fixed_numbers() {
        // N = 1, M = 1, K = 2 + jitter, Λ = 0.3, μ0 = 0.1, Φ = 0.8, α = 1.5, y = 0.6
        let mut prior = GpNoisePrior::new(0.1, 1.0, 2.0);
        prior.jitter = 0.0;
        let state = VariationalState::new(
            DMatrix::from_element(1, 1, 0.0),
            DVector::from_element(1, 0.3),
            vec![1.5],
            vec![0],
            prior,
        )
        .unwrap();
        let phi = DMatrix::from_element(1, 1, 0.8);
        let y = DVector::from_element(1, 0.6);
        let k = 2.0f64;
        let s = 1.0 / (1.0 / k + 0.3);
        let mu = k * (0.3 - 0.5) + 0.1;
        let r = (mu - s / 2.0).exp();
        let c = 0.64 / 1.5 + r;
        let logn = -0.5 * (LN_2PI + c.ln() + 0.36 / c);
        let kl = 0.5 * (s / k + (mu - 0.1).powi(2) / k - 1.0 + (k / s).ln());
        let expected = logn - 0.25 * s - kl;
        let got = collapsed_bound(&state, &phi, &y).unwrap();
        assert_abs_diff_eq!(got.value, expected, epsilon = 1e-13);
    }

    #[test]
    fn kl_vanishes_at_prior() {
        // Λ → 0 recovers q(g) = prior; check with a tiny Λ
        let prior = GpNoisePrior::new(0.4, 1.0, 1.0);
        let x = DMatrix::from_row_slice(3, 1, &[0.0, 0.5, 1.5]);
        let state =
            VariationalState::new(x, DVector::from_element(3, 1e-12), vec![], vec![], prior)
                .unwrap();
        let terms = collapsed_bound(&state, &DMatrix::zeros(3, 1), &DVector::zeros(3)).unwrap();
        // μ − μ0 = −½K𝟙 is the only remaining discrepancy at Λ ≈ 0
        let k = state.prior.covariance_unchecked(&state.inputs);
        let a = DVector::from_element(3, -0.5);
        assert_abs_diff_eq!(terms.kl, 0.5 * a.dot(&(&k * &a)), epsilon = 1e-9);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for n in [2, 3, 5] {
            for _ in 0..4 {
                let (state, phi, y) = random_state(&mut rng, n);
                let base = state.prior.clone();
                let f = |v: &[f64]| {
                    let p = BoundParams::from_slice(v);
                    evaluate(
                        &state.inputs,
                        &phi,
                        &state.active,
                        &state.alpha,
                        &y,
                        &p.prior(&base),
                        &p.lambda(),
                        false,
                    )
                    .map(|e| e.terms.value)
                    .unwrap_or(f64::NAN)
                };
                let g = |v: &[f64]| {
                    let p = BoundParams::from_slice(v);
                    evaluate(
                        &state.inputs,
                        &phi,
                        &state.active,
                        &state.alpha,
                        &y,
                        &p.prior(&base),
                        &p.lambda(),
                        true,
                    )
                    .unwrap()
                    .gradient
                    .unwrap()
                    .to_vec()
                };
                let x0 = BoundParams::from_state(&state).to_vec();
                let err = grad_check(f, g, &x0).unwrap();
                assert!(err < 1e-4, "N={n}: {err}");
            }
        }
    }

    #[test]
    fn softplus_round_trip() {
        for y in [1e-8, 0.25, 0.5, 3.0, 40.0] {
            assert_abs_diff_eq!(softplus(softplus_inv(y)), y, epsilon = 1e-12 * y.max(1.0));
        }
    }
}
