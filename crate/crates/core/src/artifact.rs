//! The trained model shared by every trainer.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::model::{BasisFunction, GpNoisePrior, KernelSpec, Standardization};
use crate::rvm::{FitStatus, RvmModel};
use crate::vi::WeightPosterior;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Rvm,
    Vi,
    Ep,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Rvm => "rvm",
            Method::Vi => "vi",
            Method::Ep => "ep",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rvm" => Ok(Method::Rvm),
            "vi" => Ok(Method::Vi),
            "ep" => Ok(Method::Ep),
            other => Err(format!("unknown method `{other}` (expected rvm, vi or ep)")),
        }
    }
}

/// Noise model in standardized units.
#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone, PartialEq)]
pub enum NoiseModel {
    /// Homoscedastic noise with variance `exp(log_variance)`.
    Constant { log_variance: f64 },
    /// Posterior of the latent log-variance process.
    ///
    /// For a test input with cross-covariances `k*`:
    /// `E[g*] = μ0 + k*ᵀ mean_weights` and
    /// `Var[g*] = k** − k*ᵀ precision_correction k*`, where
    /// `mean_weights = K_g⁻¹(μ − μ0𝟙)` and
    /// `precision_correction = K_g⁻¹ − K_g⁻¹ΣK_g⁻¹`.
    Process {
        prior: GpNoisePrior,
        inputs: DMatrix<f64>,
        mean_weights: DVector<f64>,
        precision_correction: DMatrix<f64>,
        train_mean: DVector<f64>,
        train_var: DVector<f64>,
    },
}

/// One outer iteration of a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Objective after the iteration: the collapsed bound (vi), the EP
    /// evidence estimate (ep) or the log marginal likelihood (rvm).
    pub objective: f64,
    pub active: usize,
    /// Bases removed by the pruning step of this iteration.
    pub pruned: usize,
    /// RMS change of the training predictive mean caused by pruning.
    pub prune_shift: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HrvmModel {
    pub method: Method,
    pub kernel: KernelSpec,
    pub basis: Vec<BasisFunction>,
    pub alpha: Vec<f64>,
    pub weights: WeightPosterior,
    pub noise: NoiseModel,
    pub standardization: Standardization,
    pub training_log: Vec<IterationRecord>,
    pub status: FitStatus,
    /// Free-form events recorded during the fit (skipped sites, diagnostics).
    pub fit_log: Vec<String>,
}

impl HrvmModel {
    pub fn active_count(&self) -> usize {
        self.basis.len()
    }

    pub fn final_objective(&self) -> Option<f64> {
        self.training_log.last().map(|r| r.objective)
    }
}

impl From<RvmModel> for HrvmModel {
    fn from(m: RvmModel) -> Self {
        let training_log = m
            .training_log
            .iter()
            .enumerate()
            .map(|(i, v)| IterationRecord {
                iteration: i,
                objective: *v,
                active: m.basis.len(),
                pruned: 0,
                prune_shift: 0.0,
            })
            .collect();
        HrvmModel {
            method: Method::Rvm,
            kernel: m.kernel,
            basis: m.basis,
            alpha: m.alpha,
            weights: WeightPosterior {
                mu_w: m.mu_w,
                sigma_w: m.sigma_w,
            },
            noise: NoiseModel::Constant {
                log_variance: m.sigma2.ln(),
            },
            standardization: m.standardization,
            training_log,
            status: m.status,
            fit_log: vec![],
        }
    }
}
