//! Alternating optimization of the collapsed bound.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::bound::{
    evaluate, qw_posterior, r_from_diag, BoundParams, VariationalState, WeightPosterior,
};
use crate::artifact::{HrvmModel, IterationRecord, Method, NoiseModel};
use crate::error::{HrvmError, Result};
use crate::model::{
    build_design_matrix, median_pairwise_distance, standardize, Dataset, GpNoisePrior, KernelSpec,
    Standardization,
};
use crate::numerics::optimize::{maximize, LbfgsSettings, LbfgsStatus};
use crate::numerics::Cholesky;
use crate::rvm::{sparse_posterior, FitStatus, SparseBayes};

pub(crate) const ALPHA_MIN: f64 = 1e-12;
pub(crate) const ALPHA_MAX: f64 = 1e14;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViConfig {
    pub max_iter: usize,
    /// Relative tolerance on the change of the bound between iterations.
    pub tol: f64,
    pub alpha_threshold: f64,
    pub standardize: bool,
    /// Quasi-Newton iterations per outer iteration.
    pub inner_iter: usize,
    pub learn_theta: bool,
    pub learn_mu0: bool,
    /// Unused by the deterministic trainer; kept for a uniform config surface.
    pub seed: u64,
    /// Also evaluate the closed-form precision expression printed alongside
    /// the model derivation and record it in the fit log. Never used to train.
    pub printed_alpha_diagnostic: bool,
}

impl Default for ViConfig {
    fn default() -> Self {
        ViConfig {
            max_iter: 200,
            tol: 1e-6,
            alpha_threshold: 1e12,
            standardize: true,
            inner_iter: 20,
            learn_theta: true,
            learn_mu0: true,
            seed: 0,
            printed_alpha_diagnostic: false,
        }
    }
}

/// Fixed-point precisions `αⱼ = γⱼ / μ_w,ⱼ²`, `γⱼ = 1 − αⱼ[Σ_w]ⱼⱼ`, clamped to
/// `[1e-12, 1e14]`. Bases with no remaining evidence go to the upper clamp.
pub fn update_alpha(state: &VariationalState, weights: &WeightPosterior) -> Result<Vec<f64>> {
    mackay_alpha(&state.alpha, weights)
}

pub(crate) fn mackay_alpha(alpha: &[f64], weights: &WeightPosterior) -> Result<Vec<f64>> {
    if weights.mu_w.len() != alpha.len() {
        return Err(HrvmError::Dimension(format!(
            "{} weights for {} precisions",
            weights.mu_w.len(),
            alpha.len()
        )));
    }
    Ok(alpha
        .iter()
        .enumerate()
        .map(|(j, &a)| {
            let gamma = 1.0 - a * weights.sigma_w[(j, j)];
            let m2 = weights.mu_w[j] * weights.mu_w[j];
            if !(gamma > 0.0) || m2 == 0.0 {
                return ALPHA_MAX;
            }
            let v = gamma / m2;
            if v.is_finite() {
                v.clamp(ALPHA_MIN, ALPHA_MAX)
            } else {
                ALPHA_MAX
            }
        })
        .collect())
}

/// Result of one pruning pass.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneOutcome {
    /// Design-matrix columns removed.
    pub removed: Vec<usize>,
    /// RMS change of the training predictive mean `Φμ_w`.
    pub shift_rms: f64,
}

/// Removes every basis with `α > alpha_threshold`. If that would empty the
/// model and a bias column exists, the bias alone is kept.
pub fn prune(
    state: &mut VariationalState,
    phi: &DMatrix<f64>,
    y: &DVector<f64>,
    alpha_threshold: f64,
    bias_column: Option<usize>,
) -> Result<PruneOutcome> {
    if !(alpha_threshold > 0.0) {
        return Err(HrvmError::InvalidParameter(
            "alpha threshold must be positive".into(),
        ));
    }
    let doomed: Vec<usize> = state
        .active
        .iter()
        .zip(&state.alpha)
        .filter(|(_, a)| **a > alpha_threshold)
        .map(|(j, _)| *j)
        .collect();
    if doomed.is_empty() {
        return Ok(PruneOutcome {
            removed: vec![],
            shift_rms: 0.0,
        });
    }
    let beta = state.r()?.precisions();
    let (active, alpha, outcome) = prune_sets(
        phi,
        y,
        &beta,
        &state.active,
        &state.alpha,
        alpha_threshold,
        bias_column,
    )?;
    state.active = active;
    state.alpha = alpha;
    Ok(outcome)
}

pub(crate) fn prune_sets(
    phi: &DMatrix<f64>,
    y: &DVector<f64>,
    beta: &DVector<f64>,
    active: &[usize],
    alpha: &[f64],
    alpha_threshold: f64,
    bias_column: Option<usize>,
) -> Result<(Vec<usize>, Vec<f64>, PruneOutcome)> {
    let doomed: Vec<usize> = active
        .iter()
        .zip(alpha)
        .filter(|(_, a)| **a > alpha_threshold)
        .map(|(j, _)| *j)
        .collect();
    if doomed.is_empty() {
        return Ok((
            active.to_vec(),
            alpha.to_vec(),
            PruneOutcome {
                removed: vec![],
                shift_rms: 0.0,
            },
        ));
    }
    let before = training_mean(phi, active, alpha, beta, y)?;
    let (mut kept, mut kept_alpha): (Vec<usize>, Vec<f64>) = active
        .iter()
        .zip(alpha)
        .filter(|(_, a)| **a <= alpha_threshold)
        .map(|(j, a)| (*j, *a))
        .unzip();
    let mut removed = doomed;
    if kept.is_empty() {
        if let Some(b) = bias_column {
            // keep the bias at its evidence optimum, or at the threshold if it has none
            let sb = SparseBayes::new(phi, y, beta.clone(), vec![], vec![])?;
            let (s, q) = sb.sparsity_quality(b);
            let theta = q * q - s;
            let a = if theta > 0.0 {
                (s * s / theta).min(alpha_threshold)
            } else {
                alpha_threshold
            };
            kept.push(b);
            kept_alpha.push(a);
            removed.retain(|&j| j != b);
        }
    }
    let after = training_mean(phi, &kept, &kept_alpha, beta, y)?;
    let shift_rms = ((before - after).norm_squared() / y.len() as f64).sqrt();
    Ok((kept, kept_alpha, PruneOutcome { removed, shift_rms }))
}

/// Initial active set: the single basis with the largest evidence gain,
/// falling back to the bias at the threshold.
pub(crate) fn seed_basis(
    phi: &DMatrix<f64>,
    y: &DVector<f64>,
    beta: DVector<f64>,
    bias_column: Option<usize>,
    alpha_threshold: f64,
) -> Result<(Vec<usize>, Vec<f64>)> {
    let sb = SparseBayes::new(phi, y, beta, vec![], vec![])?;
    let best = (0..phi.ncols())
        .map(|j| (j, sb.sparsity_quality(j)))
        .filter(|(_, (s, q))| q * q > *s)
        .max_by(|a, b| {
            let ga = a.1 .1 * a.1 .1 / a.1 .0;
            let gb = b.1 .1 * b.1 .1 / b.1 .0;
            ga.total_cmp(&gb)
        });
    Ok(match best {
        Some((j, (s, q))) => (vec![j], vec![s * s / (q * q - s)]),
        None => match bias_column {
            Some(b) => (vec![b], vec![alpha_threshold]),
            None => (vec![], vec![]),
        },
    })
}

/// Fixed-point precision step (kept only if the evidence under `beta` does
/// not drop) followed by one exact coordinate sweep over every column not in
/// `removed`. Columns the sweep deletes are carried at the upper clamp so
/// pruning removes them. Returns the sorted set and whether it grew.
pub(crate) fn precision_step(
    phi: &DMatrix<f64>,
    y: &DVector<f64>,
    beta: DVector<f64>,
    active: &[usize],
    alpha: &[f64],
    weights: &WeightPosterior,
    removed: &BTreeSet<usize>,
) -> Result<(Vec<usize>, Vec<f64>, bool)> {
    let mut alpha = alpha.to_vec();
    let current = sparse_posterior(phi, active, &alpha, &beta, y)?.log_marginal;
    let proposal = mackay_alpha(&alpha, weights)?;
    if let Ok(p) = sparse_posterior(phi, active, &proposal, &beta, y) {
        if p.log_marginal >= current {
            alpha = proposal;
        }
    }
    let mut sb = SparseBayes::new(phi, y, beta, active.to_vec(), alpha.clone())?;
    for j in 0..phi.ncols() {
        if removed.contains(&j) {
            continue;
        }
        sb.optimize_basis(j, f64::INFINITY, true)?;
    }
    let mut next_alpha = Vec::with_capacity(active.len());
    let mut next = Vec::with_capacity(active.len());
    for (j, a) in active.iter().zip(&alpha) {
        if sb.position(*j).is_none() {
            next.push(*j);
            next_alpha.push(ALPHA_MAX.max(*a));
        }
    }
    for (j, a) in sb.active.iter().zip(&sb.alpha) {
        next.push(*j);
        next_alpha.push(a.clamp(ALPHA_MIN, ALPHA_MAX));
    }
    let grew = next.len() > active.len();
    let order = sorted_order(&next);
    Ok((
        order.iter().map(|&i| next[i]).collect(),
        order.iter().map(|&i| next_alpha[i]).collect(),
        grew,
    ))
}

fn training_mean(
    phi: &DMatrix<f64>,
    active: &[usize],
    alpha: &[f64],
    beta: &DVector<f64>,
    y: &DVector<f64>,
) -> Result<DVector<f64>> {
    if active.is_empty() {
        return Ok(DVector::zeros(y.len()));
    }
    let post = sparse_posterior(phi, active, alpha, beta, y)?;
    Ok(phi.select_columns(active) * post.mu)
}

/// Maximizes the bound over `(Λ, θ_g, μ0)` with the precisions held fixed.
/// The state is only replaced by improving iterates.
pub fn optimize_q_g(
    state: &mut VariationalState,
    phi: &DMatrix<f64>,
    y: &DVector<f64>,
    settings: &LbfgsSettings,
    learn_theta: bool,
    learn_mu0: bool,
) -> Result<(LbfgsStatus, f64)> {
    let base = state.prior.clone();
    let n = y.len();
    let objective = |v: &[f64]| {
        let p = BoundParams::from_slice(v);
        let eval = evaluate(
            &state.inputs,
            phi,
            &state.active,
            &state.alpha,
            y,
            &p.prior(&base),
            &p.lambda(),
            true,
        )
        .ok()?;
        let mut g = eval.gradient?.to_vec();
        if !learn_theta {
            g[n] = 0.0;
            g[n + 1] = 0.0;
        }
        if !learn_mu0 {
            g[n + 2] = 0.0;
        }
        g.iter()
            .all(|v| v.is_finite())
            .then_some((eval.terms.value, g))
    };
    let x0 = BoundParams::from_state(state).to_vec();
    let res = maximize(objective, &x0, settings).ok_or_else(|| {
        HrvmError::Numeric("bound undefined at the current variational state".into())
    })?;
    let p = BoundParams::from_slice(&res.x);
    let prior = p.prior(&base);
    let lambda = p.lambda();
    let updated = VariationalState::new(
        state.inputs.clone(),
        lambda,
        state.alpha.clone(),
        state.active.clone(),
        prior,
    )?;
    *state = updated;
    let grad_inf = res.grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    Ok((res.status, grad_inf))
}

fn bound_value(state: &VariationalState, phi: &DMatrix<f64>, y: &DVector<f64>) -> Result<f64> {
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
    .terms
    .value)
}

/// Closed-form precision expression as printed with the derivation, kept
/// for comparison only: `αⱼ = Σₖ φⱼ(xₖ) / (yₖ − Rₖₖ − Σ_{i≠j} φᵢ(xₖ)/αᵢ)`.
fn printed_alpha(
    phi: &DMatrix<f64>,
    y: &DVector<f64>,
    r: &DVector<f64>,
    active: &[usize],
    alpha: &[f64],
) -> Vec<f64> {
    active
        .iter()
        .map(|&j| {
            (0..y.len())
                .map(|k| {
                    let others: f64 = active
                        .iter()
                        .zip(alpha)
                        .filter(|(i, _)| **i != j)
                        .map(|(i, a)| phi[(k, *i)] / a)
                        .sum();
                    phi[(k, j)] / (y[k] - r[k] - others)
                })
                .sum()
        })
        .collect()
}

/// `K_g⁻¹(μ − μ0𝟙) = Λ − ½` and `K_g⁻¹ − K_g⁻¹ΣK_g⁻¹ = Λ^½ B⁻¹ Λ^½`.
fn noise_predictive_terms(state: &VariationalState) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = state.lambda.len();
    let k = state.prior.covariance_unchecked(&state.inputs);
    let sl = state.lambda.map(f64::sqrt);
    let mut b = k;
    for i in 0..n {
        for j in 0..n {
            b[(i, j)] *= sl[i] * sl[j];
        }
        b[(i, i)] += 1.0;
    }
    let binv = Cholesky::new(&b)?.inverse();
    let w = DMatrix::from_fn(n, n, |i, j| sl[i] * binv[(i, j)] * sl[j]);
    Ok((state.lambda.map(|l| l - 0.5), w))
}

/// Fits the heteroscedastic RVM by alternating `q*(w)`, quasi-Newton steps
/// on `(Λ, θ_g, μ0)`, precision updates and pruning.
pub fn fit_vi(data: &Dataset, kernel: &KernelSpec, config: &ViConfig) -> Result<HrvmModel> {
    if data.n() < 3 {
        return Err(HrvmError::Data(format!(
            "fit_vi needs at least 3 points, got {}",
            data.n()
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

    let prior = GpNoisePrior::new((0.1 * y_var).ln(), median_pairwise_distance(&train.x), 1.0);
    let mut state = VariationalState::new(
        train.x.clone(),
        DVector::from_element(n, 0.5),
        vec![],
        vec![],
        prior,
    )?;

    let (active, alpha) = seed_basis(
        phi,
        y,
        state.r()?.precisions(),
        bias_column,
        config.alpha_threshold,
    )?;
    state.active = active;
    state.alpha = alpha;

    let mut removed: BTreeSet<usize> = BTreeSet::new();
    let mut fit_log = Vec::new();
    let mut bound = bound_value(&state, phi, y)?;
    let mut training_log = vec![IterationRecord {
        iteration: 0,
        objective: bound,
        active: state.active.len(),
        pruned: 0,
        prune_shift: 0.0,
    }];
    let mut status = FitStatus::MaxIter;
    let mut settings = LbfgsSettings {
        max_iter: config.inner_iter,
        ..Default::default()
    };
    let mut retried = false;
    // θ_g is held until the basis set stops growing: while the mean is
    // underfit the residuals look homoscedastic and the signal variance
    // collapses before any structure can show
    let mut settled = false;

    for iter in 1..=config.max_iter {
        let before = bound;

        // (b) q(g) and its hyperparameters
        let (ls_status, grad_inf) = optimize_q_g(
            &mut state,
            phi,
            y,
            &settings,
            config.learn_theta && settled,
            config.learn_mu0,
        )?;
        let after_g = bound_value(&state, phi, y)?;
        if ls_status == LbfgsStatus::LineSearchFailed && after_g <= before && grad_inf > 1e-3 {
            if retried {
                fit_log.push(format!(
                    "iteration {iter}: line search failed twice (|grad| = {grad_inf:.3e}); stalled"
                ));
                status = FitStatus::Stalled;
                break;
            }
            retried = true;
            settings.max_step *= 0.5;
            fit_log.push(format!(
                "iteration {iter}: line search failed; halving step budget"
            ));
        }

        // (c) precisions: fixed point first, then one exact coordinate sweep
        let r = r_from_diag(&state.mu, &state.sigma.diagonal())?;
        let weights = qw_posterior(&phi.select_columns(&state.active), &state.alpha, &r, y)?;
        if config.printed_alpha_diagnostic {
            let printed = printed_alpha(phi, y, &r.diagonal, &state.active, &state.alpha);
            fit_log.push(format!(
                "iteration {iter}: printed-formula precisions {printed:?}"
            ));
        }
        let (active, alpha, grew) = precision_step(
            phi,
            y,
            r.precisions(),
            &state.active,
            &state.alpha,
            &weights,
            &removed,
        )?;
        state.active = active;
        state.alpha = alpha;

        // (d) pruning
        let outcome = prune(&mut state, phi, y, config.alpha_threshold, bias_column)?;
        removed.extend(outcome.removed.iter().copied());

        bound = bound_value(&state, phi, y)?;
        training_log.push(IterationRecord {
            iteration: iter,
            objective: bound,
            active: state.active.len(),
            pruned: outcome.removed.len(),
            prune_shift: outcome.shift_rms,
        });
        let was_settled = settled;
        settled = settled || !grew;
        if was_settled
            && outcome.removed.is_empty()
            && (bound - before).abs() < config.tol * (1.0 + bound.abs())
        {
            status = FitStatus::Converged;
            break;
        }
    }

    let r = state.r()?;
    let weights = qw_posterior(&phi.select_columns(&state.active), &state.alpha, &r, y)?;
    let (mean_weights, precision_correction) = noise_predictive_terms(&state)?;
    let basis = state
        .active
        .iter()
        .map(|&j| design.basis[j].clone())
        .collect();
    Ok(HrvmModel {
        method: Method::Vi,
        kernel: kernel.clone(),
        basis,
        alpha: state.alpha.clone(),
        weights,
        noise: NoiseModel::Process {
            prior: state.prior.clone(),
            inputs: state.inputs.clone(),
            mean_weights,
            precision_correction,
            train_mean: state.mu.clone(),
            train_var: state.sigma.diagonal(),
        },
        standardization: record,
        training_log,
        status,
        fit_log,
    })
}

fn sorted_order(active: &[usize]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..active.len()).collect();
    order.sort_by_key(|&i| active[i]);
    order
}
