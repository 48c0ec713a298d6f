//! Expectation propagation for the log-noise process.
//!
//! Sites are Gaussians in `gₙ`, stored as unnormalized exponential-family
//! factors `t̃ₙ(g) = exp(cₙ + νₙg − ½τₙg²)`. `τₙ = 0` is a flat site and
//! negative `τₙ` is allowed as long as the posterior stays positive definite.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::artifact::{HrvmModel, IterationRecord, Method, NoiseModel};
use crate::error::{HrvmError, Result};
use crate::model::{
    build_design_matrix, median_pairwise_distance, standardize, Dataset, GpNoisePrior, KernelSpec,
    Standardization,
};
use crate::numerics::linalg::symmetrize;
use crate::numerics::Cholesky;
use crate::rvm::FitStatus;
use crate::vi::fit::{precision_step, prune_sets, seed_basis};
use crate::vi::{expected_sq_residual, qw_posterior, r_from_diag, WeightPosterior};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SiteParams {
    /// Log scale `cₙ` of the unnormalized site.
    pub log_z: f64,
    /// Precision `τₙ = 1/σ̃ₙ²`.
    pub tau: f64,
    /// Precision-mean `νₙ = μ̃ₙ/σ̃ₙ²`.
    pub nu: f64,
}

impl SiteParams {
    pub const FLAT: SiteParams = SiteParams {
        log_z: 0.0,
        tau: 0.0,
        nu: 0.0,
    };

    /// `t̃(g) = exp(log_z − (g − mean)²/(2var))`.
    pub fn from_moments(log_z: f64, mean: f64, var: f64) -> Self {
        if var.is_infinite() {
            return SiteParams {
                log_z,
                ..SiteParams::FLAT
            };
        }
        SiteParams {
            log_z: log_z - 0.5 * mean * mean / var,
            tau: 1.0 / var,
            nu: mean / var,
        }
    }

    pub fn is_flat(&self) -> bool {
        self.tau == 0.0
    }

    /// `σ̃²`; infinite for a flat site.
    pub fn site_var(&self) -> f64 {
        if self.tau == 0.0 {
            f64::INFINITY
        } else {
            1.0 / self.tau
        }
    }

    pub fn site_mu(&self) -> f64 {
        if self.tau == 0.0 {
            0.0
        } else {
            self.nu / self.tau
        }
    }

    pub fn log_value(&self, g: f64) -> f64 {
        self.log_z + self.nu * g - 0.5 * self.tau * g * g
    }
}

/// A log-concave likelihood factor in `gₙ`.
pub trait SiteFactor {
    fn log_value(&self, n: usize, g: f64) -> f64;
    fn d1(&self, n: usize, g: f64) -> f64;
    fn d2(&self, n: usize, g: f64) -> f64;
    /// A point near the factor's own peak, used to start the mode search.
    fn hint(&self, _n: usize) -> Option<f64> {
        None
    }
}

/// `exp(E_q(w)[log p(yₙ | w, gₙ)]) = exp(−½ln2π − ½gₙ − ½m̂ₙe^{−gₙ})`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpectedLikelihood {
    pub m_hat: DVector<f64>,
}

impl SiteFactor for ExpectedLikelihood {
    fn log_value(&self, n: usize, g: f64) -> f64 {
        -0.5 * LN_2PI - 0.5 * g - 0.5 * self.m_hat[n] * (-g).exp()
    }
    fn d1(&self, n: usize, g: f64) -> f64 {
        -0.5 + 0.5 * self.m_hat[n] * (-g).exp()
    }
    fn d2(&self, n: usize, g: f64) -> f64 {
        -0.5 * self.m_hat[n] * (-g).exp()
    }
    fn hint(&self, n: usize) -> Option<f64> {
        (self.m_hat[n] > 0.0).then(|| self.m_hat[n].ln())
    }
}

/// `N(obsₙ | gₙ, varₙ)`, for which EP is exact.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianFactor {
    pub obs: DVector<f64>,
    pub var: DVector<f64>,
}

impl SiteFactor for GaussianFactor {
    fn log_value(&self, n: usize, g: f64) -> f64 {
        let d = self.obs[n] - g;
        -0.5 * (LN_2PI + self.var[n].ln() + d * d / self.var[n])
    }
    fn d1(&self, n: usize, g: f64) -> f64 {
        (self.obs[n] - g) / self.var[n]
    }
    fn d2(&self, n: usize, _g: f64) -> f64 {
        -1.0 / self.var[n]
    }
}

/// Moments of the tilted density `N(g | cav) · f(g) / Z`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tilted {
    pub log_z: f64,
    pub mean: f64,
    pub var: f64,
}

#[derive(Debug, Clone)]
pub struct EpState {
    pub prior: GpNoisePrior,
    pub inputs: DMatrix<f64>,
    pub sites: Vec<SiteParams>,
    pub post_mu: DVector<f64>,
    pub post_sigma: DMatrix<f64>,
    /// `m̂ₙ = E_q(w)[(yₙ − Φₙw)²]` used by the expected-likelihood sites.
    pub m_hat: DVector<f64>,
}

impl EpState {
    /// Flat sites: the posterior is the prior.
    pub fn new(prior: GpNoisePrior, inputs: DMatrix<f64>, m_hat: DVector<f64>) -> Result<Self> {
        let n = inputs.nrows();
        if m_hat.len() != n {
            return Err(HrvmError::Dimension(format!(
                "{} residuals for {n} inputs",
                m_hat.len()
            )));
        }
        let sites = vec![SiteParams::FLAT; n];
        let post = ep_posterior(&prior, &inputs, &sites)?;
        Ok(EpState {
            prior,
            inputs,
            sites,
            post_mu: post.mu,
            post_sigma: post.sigma,
            m_hat,
        })
    }

    /// Recomputes the posterior from the sites.
    pub fn refresh(&mut self) -> Result<f64> {
        let post = ep_posterior(&self.prior, &self.inputs, &self.sites)?;
        self.post_mu = post.mu;
        self.post_sigma = post.sigma;
        Ok(post.log_z)
    }
}

/// Cavity `(mean, var)` for site `n`, or `None` when the cavity variance is
/// not positive.
pub fn cavity(state: &EpState, n: usize) -> Option<(f64, f64)> {
    let s = state.post_sigma[(n, n)];
    let site = &state.sites[n];
    let tau = 1.0 / s - site.tau;
    let nu = state.post_mu[n] / s - site.nu;
    (tau > 0.0 && tau.is_finite()).then(|| (nu / tau, 1.0 / tau))
}

/// Tilted moments for an arbitrary log-concave factor. The density is
/// located by Newton's method and integrated with the trapezoidal rule over
/// the bracket where it is non-negligible; for these smooth, rapidly decaying
/// integrands that converges far faster than a fixed Gauss–Hermite rule,
/// which is inaccurate when the cavity is wide.
pub fn tilted_moments_with<F: SiteFactor + ?Sized>(
    factor: &F,
    n: usize,
    cav_mu: f64,
    cav_var: f64,
) -> Result<Tilted> {
    if !(cav_var > 0.0) || !cav_var.is_finite() || !cav_mu.is_finite() {
        return Err(HrvmError::InvalidParameter(format!(
            "cavity N({cav_mu}, {cav_var})"
        )));
    }
    let log_t = |g: f64| -0.5 * (g - cav_mu) * (g - cav_mu) / cav_var + factor.log_value(n, g);
    // Newton with backtracking on the concave log tilted density
    let mut g = match factor.hint(n) {
        Some(h) if h.is_finite() && log_t(h) > log_t(cav_mu) => h,
        _ => cav_mu,
    };
    for _ in 0..200 {
        let d1 = -(g - cav_mu) / cav_var + factor.d1(n, g);
        let d2 = -1.0 / cav_var + factor.d2(n, g);
        let mut step = -d1 / d2;
        let f0 = log_t(g);
        let mut accepted = false;
        for _ in 0..60 {
            let cand = g + step;
            let fc = log_t(cand);
            if fc.is_finite() && fc >= f0 - 1e-12 * (1.0 + f0.abs()) {
                g = cand;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted || step.abs() < 1e-13 * (1.0 + g.abs()) {
            break;
        }
    }
    let curv = -1.0 / cav_var + factor.d2(n, g);
    if !(curv < 0.0) || !g.is_finite() {
        return Err(HrvmError::Numeric(format!(
            "tilted density {n} has no interior mode"
        )));
    }
    // bracket the region within TAIL_NATS of the peak; log t is concave so
    // stepping outwards by growing multiples of the Laplace width is enough
    let peak = log_t(g);
    let width = (-1.0 / curv).sqrt();
    let edge = |dir: f64| {
        let mut step = width;
        let mut x = g + dir * step;
        while log_t(x) > peak - TAIL_NATS {
            step *= 1.5;
            x = g + dir * step;
        }
        x
    };
    let (lo, hi) = (edge(-1.0), edge(1.0));
    let h = (hi - lo) / TILTED_INTERVALS as f64;
    let (mut z0, mut z1, mut z2) = (0.0, 0.0, 0.0);
    for i in 0..=TILTED_INTERVALS {
        let gi = lo + i as f64 * h;
        let w = if i == 0 || i == TILTED_INTERVALS {
            0.5
        } else {
            1.0
        };
        let e = w * (log_t(gi) - peak).exp();
        let d = gi - g;
        z0 += e;
        z1 += e * d;
        z2 += e * d * d;
    }
    let shift = z1 / z0;
    let var = z2 / z0 - shift * shift;
    let log_z = peak + (z0 * h).ln() - 0.5 * (LN_2PI + cav_var.ln());
    let out = Tilted {
        log_z,
        mean: g + shift,
        var,
    };
    if !(out.var > 0.0) || !out.log_z.is_finite() || !out.mean.is_finite() {
        return Err(HrvmError::Numeric(format!(
            "degenerate tilted moments for site {n}"
        )));
    }
    Ok(out)
}

/// Mass beyond this many nats below the peak is ignored.
const TAIL_NATS: f64 = 46.0;
const TILTED_INTERVALS: usize = 800;

/// Tilted moments for the expected-likelihood site with residual `m_hat`.
pub fn tilted_moments(cav_mu: f64, cav_var: f64, y_n: f64, m_hat: f64) -> Result<Tilted> {
    let _ = y_n; // the factor only sees y through m̂
    if !(m_hat >= 0.0) {
        return Err(HrvmError::InvalidParameter(format!(
            "m_hat must be non-negative, got {m_hat}"
        )));
    }
    let factor = ExpectedLikelihood {
        m_hat: DVector::from_element(1, m_hat),
    };
    tilted_moments_with(&factor, 0, cav_mu, cav_var)
}

/// Site `tilted ÷ cavity` blended with the old site on natural parameters.
/// Returns `false` (state untouched) when the update would break positive
/// definiteness of the posterior.
pub fn site_update(state: &mut EpState, n: usize, tilted: &Tilted, damping: f64) -> Result<bool> {
    if !(0.0..=1.0).contains(&damping) {
        return Err(HrvmError::InvalidParameter(format!(
            "damping must lie in [0, 1], got {damping}"
        )));
    }
    if damping == 0.0 {
        return Ok(true);
    }
    let (cm, cv) = cavity(state, n)
        .ok_or_else(|| HrvmError::Numeric(format!("site {n} has no valid cavity")))?;
    let old = state.sites[n];
    let tau_new = 1.0 / tilted.var - 1.0 / cv;
    let nu_new = tilted.mean / tilted.var - cm / cv;
    let tau = (1.0 - damping) * old.tau + damping * tau_new;
    let nu = (1.0 - damping) * old.nu + damping * nu_new;
    // normalizer of the blended site so that ∫ cavity · site = Z_tilted
    let vt = 1.0 / (1.0 / cv + tau);
    if !(vt > 0.0) {
        return Ok(false);
    }
    let mt = vt * (cm / cv + nu);
    let log_z = tilted.log_z - 0.5 * (vt / cv).ln() - 0.5 * (mt * mt / vt - cm * cm / cv);

    let dtau = tau - old.tau;
    let dnu = nu - old.nu;
    let snn = state.post_sigma[(n, n)];
    let denom = 1.0 + dtau * snn;
    if !(denom > 0.0) {
        return Ok(false);
    }
    let k = dtau / denom;
    let s = state.post_sigma.column(n).into_owned();
    let new_snn = snn - k * snn * snn;
    if !(new_snn > 0.0) {
        return Ok(false);
    }
    let mu_n = state.post_mu[n];
    state.post_mu += &s * (dnu - k * (mu_n + dnu * snn));
    state.post_sigma -= k * &s * s.transpose();
    state.sites[n] = SiteParams { log_z, tau, nu };
    Ok(true)
}

/// Posterior implied by the sites.
#[derive(Debug, Clone, PartialEq)]
pub struct EpPosterior {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    /// `log ∫ N(g | μ0𝟙, K_g) ∏ t̃ₙ(gₙ) dg`.
    pub log_z: f64,
}

/// `Σ = (K_g⁻¹ + T)⁻¹`, `μ = Σ(ν + K_g⁻¹μ0𝟙)` and the EP evidence.
pub fn ep_posterior(
    prior: &GpNoisePrior,
    inputs: &DMatrix<f64>,
    sites: &[SiteParams],
) -> Result<EpPosterior> {
    prior.validate()?;
    let n = inputs.nrows();
    if sites.len() != n {
        return Err(HrvmError::Dimension(format!(
            "{} sites for {n} inputs",
            sites.len()
        )));
    }
    let k = prior.covariance_unchecked(inputs);
    let m0 = prior.mu0;
    let tau = DVector::from_iterator(n, sites.iter().map(|s| s.tau));
    let nu = DVector::from_iterator(n, sites.iter().map(|s| s.nu));
    // I + KT
    let mut ikt = k.clone();
    for (j, mut col) in ikt.column_iter_mut().enumerate() {
        col *= tau[j];
    }
    for i in 0..n {
        ikt[(i, i)] += 1.0;
    }
    let lu = ikt.clone().lu();
    let det = lu.determinant();
    if !(det > 0.0) || !det.is_finite() {
        return Err(HrvmError::NotPositiveDefinite { pivot: 0 });
    }
    let sigma = symmetrize(
        lu.solve(&k)
            .ok_or(HrvmError::NotPositiveDefinite { pivot: 0 })?,
    );
    Cholesky::new(&sigma)?;
    let ones = DVector::from_element(n, m0);
    let mu = &sigma * &nu
        + lu.solve(&ones)
            .ok_or(HrvmError::NotPositiveDefinite { pivot: 0 })?;
    // shifted frame g = μ0𝟙 + h
    let c_shift: f64 = sites
        .iter()
        .map(|s| s.log_z + s.nu * m0 - 0.5 * s.tau * m0 * m0)
        .sum();
    let nu_shift = DVector::from_iterator(n, sites.iter().map(|s| s.nu - s.tau * m0));
    let log_z = c_shift + 0.5 * nu_shift.dot(&(&sigma * &nu_shift)) - 0.5 * det.ln();
    Ok(EpPosterior { mu, sigma, log_z })
}

/// One sweep over the sites in the given order. Returns the largest change
/// of a site natural parameter and the sites that were skipped or rejected.
pub fn ep_pass<F: SiteFactor + ?Sized>(
    state: &mut EpState,
    factor: &F,
    order: &[usize],
    damping: f64,
    log: &mut Vec<String>,
) -> Result<f64> {
    let mut change = 0.0f64;
    for &n in order {
        let Some((cm, cv)) = cavity(state, n) else {
            log.push(format!("site {n}: non-positive cavity variance, skipped"));
            continue;
        };
        let tilted = match tilted_moments_with(factor, n, cm, cv) {
            Ok(t) => t,
            Err(e) => {
                log.push(format!("site {n}: {e}, skipped"));
                continue;
            }
        };
        let old = state.sites[n];
        if site_update(state, n, &tilted, damping)? {
            let new = state.sites[n];
            change = change
                .max((new.tau - old.tau).abs())
                .max((new.nu - old.nu).abs());
        } else {
            log.push(format!(
                "site {n}: update rejected (posterior not positive definite)"
            ));
        }
    }
    Ok(change)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpConfig {
    pub max_passes: usize,
    pub damping: f64,
    /// Tolerance on the largest site natural-parameter change in a pass.
    pub tol: f64,
    pub alpha_threshold: f64,
    pub standardize: bool,
    pub seed: u64,
    /// Noise prior in standardized units; initialized from the data when absent.
    pub noise_prior: Option<GpNoisePrior>,
}

impl Default for EpConfig {
    fn default() -> Self {
        EpConfig {
            max_passes: 100,
            damping: 0.8,
            tol: 1e-4,
            alpha_threshold: 1e12,
            standardize: true,
            seed: 0,
            noise_prior: None,
        }
    }
}

/// Alternates `q(w)`, one EP pass over the noise sites and the precision
/// update with pruning. The noise-process hyperparameters stay fixed.
pub fn fit_ep(data: &Dataset, kernel: &KernelSpec, config: &EpConfig) -> Result<HrvmModel> {
    if data.n() < 3 {
        return Err(HrvmError::Data(format!(
            "fit_ep needs at least 3 points, got {}",
            data.n()
        )));
    }
    if !(config.damping > 0.0 && config.damping <= 1.0) {
        return Err(HrvmError::InvalidParameter(format!(
            "damping must lie in (0, 1], got {}",
            config.damping
        )));
    }
    let (train, record) = if config.standardize {
        standardize(data)
    } else {
        (data.clone(), Standardization::identity(data.q()))
    };
    let design = build_design_matrix(&train, kernel)?;
    let phi = &design.values;
    let y = &train.y;
    let n = y.len();
    let nf = n as f64;
    let y_var = (y.iter().map(|v| v * v).sum::<f64>() / nf - (y.sum() / nf).powi(2)).max(1e-12);
    let bias_column = kernel.include_bias.then_some(0);
    let prior = config.noise_prior.clone().unwrap_or_else(|| {
        GpNoisePrior::new((0.1 * y_var).ln(), median_pairwise_distance(&train.x), 1.0)
    });

    let mut ep = EpState::new(prior, train.x.clone(), DVector::zeros(n))?;
    let r0 = r_from_diag(&ep.post_mu, &ep.post_sigma.diagonal())?;
    let (mut active, mut alpha) =
        seed_basis(phi, y, r0.precisions(), bias_column, config.alpha_threshold)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut removed: BTreeSet<usize> = BTreeSet::new();
    let mut fit_log = Vec::new();
    let mut training_log = Vec::new();
    let mut damping = config.damping;
    let mut halved = false;
    let mut rising = 0usize;
    let mut last_change = f64::INFINITY;
    let mut status = FitStatus::MaxIter;
    let mut best: Option<(f64, EpState, Vec<usize>, Vec<f64>)> = None;

    for pass in 1..=config.max_passes {
        // (a) q(w) under the current noise posterior
        let r = r_from_diag(&ep.post_mu, &ep.post_sigma.diagonal())?;
        let pa = phi.select_columns(&active);
        let weights = qw_posterior(&pa, &alpha, &r, y)?;
        let post = crate::rvm::sparse_posterior(phi, &active, &alpha, &r.precisions(), y)?;
        ep.m_hat = expected_sq_residual(phi, &active, &post, y);

        // (b) one EP pass in seeded random order
        order.shuffle(&mut rng);
        let factor = ExpectedLikelihood {
            m_hat: ep.m_hat.clone(),
        };
        let change = ep_pass(&mut ep, &factor, &order, damping, &mut fit_log)?;
        let log_z = ep.refresh()?;

        // (c) precisions and pruning
        let r = r_from_diag(&ep.post_mu, &ep.post_sigma.diagonal())?;
        let weights = if weights.mu_w.len() == alpha.len() {
            qw_posterior(&pa, &alpha, &r, y)?
        } else {
            weights
        };
        let (a2, al2, grew) =
            precision_step(phi, y, r.precisions(), &active, &alpha, &weights, &removed)?;
        let (a3, al3, outcome) = prune_sets(
            phi,
            y,
            &r.precisions(),
            &a2,
            &al2,
            config.alpha_threshold,
            bias_column,
        )?;
        removed.extend(outcome.removed.iter().copied());
        active = a3;
        alpha = al3;

        training_log.push(IterationRecord {
            iteration: pass,
            objective: log_z,
            active: active.len(),
            pruned: outcome.removed.len(),
            prune_shift: outcome.shift_rms,
        });
        if best.as_ref().is_none_or(|b| change < b.0) {
            best = Some((change, ep.clone(), active.clone(), alpha.clone()));
        }
        if change < config.tol && !grew && outcome.removed.is_empty() {
            status = FitStatus::Converged;
            break;
        }
        // passes that change the basis set move m̂ and do not count
        let structural = grew || !outcome.removed.is_empty();
        rising = if change > last_change && !structural {
            rising + 1
        } else {
            0
        };
        last_change = change;
        if rising >= 5 {
            if halved {
                fit_log.push(format!(
                    "pass {pass}: site changes still rising after damping {damping}; stopping"
                ));
                status = FitStatus::Oscillating;
                if let Some((_, s, a, al)) = best.take() {
                    ep = s;
                    active = a;
                    alpha = al;
                }
                break;
            }
            damping *= 0.5;
            halved = true;
            rising = 0;
            fit_log.push(format!(
                "pass {pass}: site changes rising for 5 passes; damping halved to {damping}"
            ));
        }
    }

    let r = r_from_diag(&ep.post_mu, &ep.post_sigma.diagonal())?;
    let weights = if active.is_empty() {
        WeightPosterior {
            mu_w: DVector::zeros(0),
            sigma_w: DMatrix::zeros(0, 0),
        }
    } else {
        qw_posterior(&phi.select_columns(&active), &alpha, &r, y)?
    };
    let (mean_weights, precision_correction) = predictive_terms(&ep)?;
    let basis = active.iter().map(|&j| design.basis[j].clone()).collect();
    Ok(HrvmModel {
        method: Method::Ep,
        kernel: kernel.clone(),
        basis,
        alpha,
        weights,
        noise: NoiseModel::Process {
            prior: ep.prior.clone(),
            inputs: ep.inputs.clone(),
            mean_weights,
            precision_correction,
            train_mean: ep.post_mu.clone(),
            train_var: ep.post_sigma.diagonal(),
        },
        standardization: record,
        training_log,
        status,
        fit_log,
    })
}

/// `K⁻¹(μ − μ0𝟙) = (I + TK)⁻¹(ν − μ0τ)` and `K⁻¹ − K⁻¹ΣK⁻¹ = (I + TK)⁻¹T`.
fn predictive_terms(ep: &EpState) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = ep.sites.len();
    let k = ep.prior.covariance_unchecked(&ep.inputs);
    let tau = DVector::from_iterator(n, ep.sites.iter().map(|s| s.tau));
    let mut itk = k;
    for (i, mut row) in itk.row_iter_mut().enumerate() {
        row *= tau[i];
    }
    for i in 0..n {
        itk[(i, i)] += 1.0;
    }
    let lu = itk.lu();
    let rhs = DVector::from_iterator(n, ep.sites.iter().map(|s| s.nu - s.tau * ep.prior.mu0));
    let v = lu
        .solve(&rhs)
        .ok_or(HrvmError::NotPositiveDefinite { pivot: 0 })?;
    let w = lu
        .solve(&DMatrix::from_diagonal(&tau))
        .ok_or(HrvmError::NotPositiveDefinite { pivot: 0 })?;
    Ok((v, symmetrize(w)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn grid_tilted(cm: f64, cv: f64, m_hat: f64) -> (f64, f64, f64) {
        let f = ExpectedLikelihood {
            m_hat: DVector::from_element(1, m_hat),
        };
        let t = tilted_moments_with(&f, 0, cm, cv).unwrap();
        let sd = t.var.sqrt();
        let (lo, hi) = (t.mean - 15.0 * sd, t.mean + 15.0 * sd);
        let k = 100_000;
        let h = (hi - lo) / k as f64;
        let (mut z0, mut z1, mut z2) = (0.0, 0.0, 0.0);
        for i in 0..=k {
            let g = lo + i as f64 * h;
            let w = if i == 0 || i == k { 0.5 } else { 1.0 };
            let d = (-0.5 * (LN_2PI + cv.ln()) - 0.5 * (g - cm).powi(2) / cv + f.log_value(0, g))
                .exp()
                * w;
            z0 += d;
            z1 += d * g;
            z2 += d * g * g;
        }
        let mean = z1 / z0;
        ((z0 * h).ln(), mean, z2 / z0 - mean * mean)
    }

    #[test]
    fn flat_site_cavity_is_marginal() {
        let st = EpState::new(
            GpNoisePrior::new(0.3, 1.0, 2.0),
            DMatrix::from_element(1, 1, 0.0),
            DVector::zeros(1),
        )
        .unwrap();
        let (m, v) = cavity(&st, 0).unwrap();
        assert_abs_diff_eq!(m, 0.3, epsilon = 1e-14);
        assert_abs_diff_eq!(v, st.post_sigma[(0, 0)], epsilon = 1e-14);
    }

    #[test]
    fn cavity_of_half_posterior() {
        let mut prior = GpNoisePrior::new(0.0, 1.0, 1.0);
        prior.jitter = 1e-300;
        let mut st =
            EpState::new(prior, DMatrix::from_element(1, 1, 0.0), DVector::zeros(1)).unwrap();
        st.sites[0] = SiteParams::from_moments(0.0, 0.0, 1.0);
        st.refresh().unwrap();
        assert_abs_diff_eq!(st.post_sigma[(0, 0)], 0.5, epsilon = 1e-12);
        let (m, v) = cavity(&st, 0).unwrap();
        assert_abs_diff_eq!(m, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn cavity_site_round_trip() {
        let x = DMatrix::from_row_slice(3, 1, &[0.0, 0.4, 1.1]);
        let mut st = EpState::new(GpNoisePrior::new(-0.5, 0.8, 1.3), x, DVector::zeros(3)).unwrap();
        st.sites = vec![
            SiteParams {
                log_z: 0.1,
                tau: 0.7,
                nu: -0.3,
            },
            SiteParams {
                log_z: -0.2,
                tau: 1.9,
                nu: 0.4,
            },
            SiteParams {
                log_z: 0.0,
                tau: -0.1,
                nu: 0.05,
            },
        ];
        st.refresh().unwrap();
        for n in 0..3 {
            let (cm, cv) = cavity(&st, n).unwrap();
            let s = st.sites[n];
            let prec = 1.0 / cv + s.tau;
            assert_abs_diff_eq!(1.0 / prec, st.post_sigma[(n, n)], epsilon = 1e-12);
            assert_abs_diff_eq!((cm / cv + s.nu) / prec, st.post_mu[n], epsilon = 1e-12);
        }
    }

    #[test]
    fn point_mass_cavity_tilted_mean() {
        let t = tilted_moments(0.7, 1e-8, 0.0, 0.7f64.exp()).unwrap();
        assert_abs_diff_eq!(t.mean, 0.7, epsilon = 1e-6);
    }

    #[test]
    fn tilted_matches_grid_sweep() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            let cm = rng.random_range(-3.0..3.0);
            let cv = rng.random_range(0.05..4.0);
            let m_hat = 10f64.powf(rng.random_range(-4.0..2.0));
            let t = tilted_moments(cm, cv, 0.0, m_hat).unwrap();
            let (lz, m, v) = grid_tilted(cm, cv, m_hat);
            assert!((t.log_z - lz).abs() < 1e-8, "{} {}", t.log_z, lz);
            assert!((t.mean - m).abs() < 1e-8, "{} {}", t.mean, m);
            assert!((t.var - v).abs() < 1e-8, "{} {}", t.var, v);
        }
    }

    #[test]
    fn tilted_mean_increases_with_residual() {
        let mut last = f64::NEG_INFINITY;
        for k in 0..40 {
            let m_hat = 0.01 * 1.3f64.powi(k);
            let t = tilted_moments(0.2, 0.9, 0.0, m_hat).unwrap();
            let (_, grid_mean, _) = grid_tilted(0.2, 0.9, m_hat);
            assert!((t.mean - grid_mean).abs() < 1e-8);
            assert!(t.mean > last);
            last = t.mean;
        }
    }

    #[test]
    fn extreme_residuals_stay_finite() {
        for m_hat in [0.0, 1e-300, 1e-30, 1e30, 1e300] {
            let t = tilted_moments(0.0, 1.0, 0.0, m_hat).unwrap();
            assert!(
                t.mean.is_finite() && t.var > 0.0 && t.log_z.is_finite(),
                "{m_hat}: {t:?}"
            );
        }
    }

    #[test]
    fn zero_damping_is_noop_and_full_step_recovers_gaussian_factor() {
        let x = DMatrix::from_row_slice(2, 1, &[0.0, 0.5]);
        let prior = GpNoisePrior::new(0.2, 1.0, 1.0);
        let mut st = EpState::new(prior, x, DVector::zeros(2)).unwrap();
        let f = GaussianFactor {
            obs: DVector::from_vec(vec![1.0, -0.5]),
            var: DVector::from_vec(vec![0.3, 2.0]),
        };
        let (cm, cv) = cavity(&st, 0).unwrap();
        let t = tilted_moments_with(&f, 0, cm, cv).unwrap();
        let before = st.clone();
        site_update(&mut st, 0, &t, 0.0).unwrap();
        assert_eq!(st.sites, before.sites);
        assert_eq!(st.post_sigma, before.post_sigma);
        assert!(site_update(&mut st, 0, &t, 1.0).unwrap());
        let s = st.sites[0];
        let exact = SiteParams::from_moments(-0.5 * (LN_2PI + 0.3f64.ln()), 1.0, 0.3);
        assert_abs_diff_eq!(s.tau, exact.tau, epsilon = 1e-10);
        assert_abs_diff_eq!(s.nu, exact.nu, epsilon = 1e-10);
        assert_abs_diff_eq!(s.log_z, exact.log_z, epsilon = 1e-10);
        // rank-one refresh agrees with recomputation
        let post = ep_posterior(&st.prior, &st.inputs, &st.sites).unwrap();
        assert!((post.sigma - &st.post_sigma).amax() < 1e-10);
        assert!((post.mu - &st.post_mu).amax() < 1e-10);
    }

    #[test]
    fn flat_sites_give_prior() {
        let x = DMatrix::from_row_slice(3, 1, &[0.0, 1.0, 2.5]);
        let prior = GpNoisePrior::new(-0.4, 1.0, 1.5);
        let post = ep_posterior(&prior, &x, &[SiteParams::FLAT; 3]).unwrap();
        let k = crate::model::gp_covariance(&x, &prior).unwrap();
        assert!((post.sigma - k).amax() < 1e-12);
        assert!(post.mu.iter().all(|m| (m + 0.4).abs() < 1e-12));
        assert_abs_diff_eq!(post.log_z, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn single_site_combination() {
        let mut prior = GpNoisePrior::new(0.0, 1.0, 1.0);
        prior.jitter = 1e-300;
        let post = ep_posterior(
            &prior,
            &DMatrix::zeros(1, 1),
            &[SiteParams::from_moments(0.0, 1.0, 1.0)],
        )
        .unwrap();
        assert_abs_diff_eq!(post.sigma[(0, 0)], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(post.mu[0], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn single_point_matches_grid_posterior() {
        let x = DMatrix::zeros(1, 1);
        let prior = GpNoisePrior::new(-0.3, 1.0, 0.8);
        let m_hat = DVector::from_element(1, 2.5);
        let mut st = EpState::new(prior.clone(), x, m_hat.clone()).unwrap();
        let f = ExpectedLikelihood { m_hat };
        let mut log = vec![];
        for _ in 0..50 {
            ep_pass(&mut st, &f, &[0], 0.8, &mut log).unwrap();
        }
        let (_, m, v) = grid_tilted(prior.mu0, 0.8 + prior.jitter, 2.5);
        assert!((st.post_mu[0] - m).abs() < 1e-3);
        assert!((st.post_sigma[(0, 0)] - v).abs() < 1e-3);
        assert!(log.is_empty());
    }
}
