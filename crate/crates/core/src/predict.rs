//! Predictive distributions and evaluation metrics.

use nalgebra::{DMatrix, DVector};

use crate::artifact::{HrvmModel, NoiseModel};
use crate::error::{HrvmError, Result};
use crate::model::eval_basis;
use crate::numerics::quadrature::DEFAULT_ORDER;
use crate::numerics::{gauss_hermite, lognormal_mean};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Predictive moments in original units. `g_mean`/`g_var` describe the log
/// noise variance of the targets.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveDist {
    pub latent_mean: DVector<f64>,
    pub latent_var: DVector<f64>,
    pub g_mean: DVector<f64>,
    pub g_var: DVector<f64>,
    pub total_var: DVector<f64>,
}

impl PredictiveDist {
    pub fn len(&self) -> usize {
        self.latent_mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latent_mean.is_empty()
    }

    /// Latent variances plus `E[e^{g*}]`.
    pub fn from_parts(
        latent_mean: DVector<f64>,
        latent_var: DVector<f64>,
        g_mean: DVector<f64>,
        g_var: DVector<f64>,
    ) -> Self {
        let total_var = DVector::from_fn(latent_mean.len(), |i, _| {
            latent_var[i] + lognormal_mean(g_mean[i], g_var[i])
        });
        PredictiveDist {
            latent_mean,
            latent_var,
            g_mean,
            g_var,
            total_var,
        }
    }

    /// Expected noise standard deviation `√E[e^{g*}]`.
    pub fn noise_sd(&self) -> DVector<f64> {
        DVector::from_fn(self.len(), |i, _| {
            lognormal_mean(self.g_mean[i], self.g_var[i]).sqrt()
        })
    }
}

/// Predictive distribution at the rows of `x_star` (original units).
pub fn predict(model: &HrvmModel, x_star: &DMatrix<f64>) -> Result<PredictiveDist> {
    let st = &model.standardization;
    let xs = st.apply_x(x_star)?;
    let n = xs.nrows();
    let (mut mean, mut var) = (DVector::zeros(n), DVector::zeros(n));
    if !model.basis.is_empty() {
        let phi = eval_basis(&model.kernel, &model.basis, &xs);
        mean = &phi * &model.weights.mu_w;
        let ps = &phi * &model.weights.sigma_w;
        var = DVector::from_fn(n, |i, _| ps.row(i).dot(&phi.row(i)).max(0.0));
    }
    let (g_mean, g_var) = match &model.noise {
        NoiseModel::Constant { log_variance } => {
            (DVector::from_element(n, *log_variance), DVector::zeros(n))
        }
        NoiseModel::Process {
            prior,
            inputs,
            mean_weights,
            precision_correction,
            ..
        } => {
            let rows: Vec<Vec<f64>> = inputs
                .row_iter()
                .map(|r| r.iter().copied().collect())
                .collect();
            let mut gm = DVector::zeros(n);
            let mut gv = DVector::zeros(n);
            for i in 0..n {
                let x: Vec<f64> = xs.row(i).iter().copied().collect();
                let k = DVector::from_iterator(rows.len(), rows.iter().map(|r| prior.cross(&x, r)));
                gm[i] = prior.mu0 + k.dot(mean_weights);
                let kss = prior.cross(&x, &x) + prior.jitter;
                gv[i] = (kss - (precision_correction * &k).dot(&k)).max(0.0);
            }
            (gm, gv)
        }
    };
    let s2 = st.y_scale * st.y_scale;
    Ok(PredictiveDist::from_parts(
        st.invert_y(&mean),
        var * s2,
        g_mean.add_scalar(s2.ln()),
        g_var,
    ))
}

/// Mean negative log predictive density, integrating the noise process
/// with 32-node Gauss–Hermite (exact when `g_var = 0`).
pub fn nlpd(pred: &PredictiveDist, y: &DVector<f64>) -> Result<f64> {
    if y.len() != pred.len() {
        return Err(HrvmError::Dimension(format!(
            "{} targets for {} predictions",
            y.len(),
            pred.len()
        )));
    }
    if y.is_empty() {
        return Err(HrvmError::Data("nlpd of an empty set".into()));
    }
    let q = gauss_hermite(DEFAULT_ORDER)?;
    let mut total = 0.0;
    for i in 0..y.len() {
        let (m, v, gm, gv) = (
            pred.latent_mean[i],
            pred.latent_var[i],
            pred.g_mean[i],
            pred.g_var[i],
        );
        if ![m, v, gm, gv, y[i]].iter().all(|t| t.is_finite()) {
            return Err(HrvmError::NonFinite(format!("prediction {i}")));
        }
        let r2 = (y[i] - m) * (y[i] - m);
        let logpdf = |g: f64| {
            let s = v + g.exp();
            -0.5 * (LN_2PI + s.ln() + r2 / s)
        };
        let lp = if gv == 0.0 {
            logpdf(gm)
        } else {
            let sd = gv.sqrt();
            let terms: Vec<f64> = q
                .nodes()
                .iter()
                .zip(q.weights())
                .map(|(z, w)| w.ln() + logpdf(gm + sd * z))
                .collect();
            let mx = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            mx + terms.iter().map(|t| (t - mx).exp()).sum::<f64>().ln()
        };
        total -= lp;
    }
    Ok(total / y.len() as f64)
}

pub fn rmse(pred_mean: &DVector<f64>, y: &DVector<f64>) -> Result<f64> {
    if pred_mean.len() != y.len() {
        return Err(HrvmError::Dimension(format!(
            "{} predictions for {} targets",
            pred_mean.len(),
            y.len()
        )));
    }
    if y.is_empty() {
        return Err(HrvmError::Data("rmse of an empty set".into()));
    }
    Ok(((pred_mean - y).norm_squared() / y.len() as f64).sqrt())
}
