//! Domain types: datasets, kernels, design matrices and the GP prior on the
//! log noise variance.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{HrvmError, Result};
use crate::numerics::Cholesky;

/// Per-column affine map to zero mean and unit standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub x_mean: Vec<f64>,
    pub x_scale: Vec<f64>,
    pub y_mean: f64,
    pub y_scale: f64,
}

impl Standardization {
    pub fn identity(q: usize) -> Self {
        Standardization {
            x_mean: vec![0.0; q],
            x_scale: vec![1.0; q],
            y_mean: 0.0,
            y_scale: 1.0,
        }
    }

    pub fn apply_x(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.x_mean.len() {
            return Err(HrvmError::Dimension(format!(
                "inputs have {} columns, model expects {}",
                x.ncols(),
                self.x_mean.len()
            )));
        }
        let mut out = x.clone();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            col.iter_mut()
                .for_each(|v| *v = (*v - self.x_mean[j]) / self.x_scale[j]);
        }
        Ok(out)
    }

    pub fn invert_x(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = x.clone();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            col.iter_mut()
                .for_each(|v| *v = *v * self.x_scale[j] + self.x_mean[j]);
        }
        out
    }

    pub fn apply_y(&self, y: &DVector<f64>) -> DVector<f64> {
        y.map(|v| (v - self.y_mean) / self.y_scale)
    }

    pub fn invert_y(&self, y: &DVector<f64>) -> DVector<f64> {
        y.map(|v| v * self.y_scale + self.y_mean)
    }
}

/// Inputs `x` (N×Q) and targets `y` (N).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub standardization: Option<Standardization>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        if x.nrows() == 0 || x.ncols() == 0 {
            return Err(HrvmError::Data(format!(
                "dataset needs N >= 1 and Q >= 1, got {}x{}",
                x.nrows(),
                x.ncols()
            )));
        }
        if x.nrows() != y.len() {
            return Err(HrvmError::Dimension(format!(
                "{} input rows but {} targets",
                x.nrows(),
                y.len()
            )));
        }
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(HrvmError::NonFinite(format!(
                "input row {} column {}",
                i % x.nrows(),
                i / x.nrows()
            )));
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(HrvmError::NonFinite(format!("target {i}")));
        }
        Ok(Dataset {
            x,
            y,
            standardization: None,
        })
    }

    /// One-dimensional inputs.
    pub fn from_1d(x: &[f64], y: &[f64]) -> Result<Self> {
        Dataset::new(
            DMatrix::from_column_slice(x.len(), 1, x),
            DVector::from_column_slice(y),
        )
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn q(&self) -> usize {
        self.x.ncols()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.x.row(i).iter().copied().collect()
    }

    /// Rows selected by index, standardization metadata dropped.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let x = self.x.select_rows(idx);
        let y = DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.y[i]));
        Dataset {
            x,
            y,
            standardization: None,
        }
    }
}

fn mean_and_scale(
    values: impl Iterator<Item = f64> + Clone,
    n: usize,
    center_degenerate: bool,
) -> (f64, f64) {
    let nf = n as f64;
    let mean = values.clone().sum::<f64>() / nf;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / nf;
    let sd = var.sqrt();
    if sd > 0.0 && sd.is_finite() {
        (mean, sd)
    } else if center_degenerate {
        (mean, 1.0)
    } else {
        // degenerate column passes through unchanged
        (0.0, 1.0)
    }
}

/// Maps every input column and the targets to zero mean and unit standard
/// deviation (denominator N). Zero-variance columns are left unchanged
/// (mean 0, scale 1 in the record); constant targets are only centered.
pub fn standardize(data: &Dataset) -> (Dataset, Standardization) {
    let n = data.n();
    let mut x_mean = Vec::with_capacity(data.q());
    let mut x_scale = Vec::with_capacity(data.q());
    for col in data.x.column_iter() {
        let (m, s) = mean_and_scale(col.iter().copied(), n, false);
        x_mean.push(m);
        x_scale.push(s);
    }
    let (y_mean, y_scale) = mean_and_scale(data.y.iter().copied(), n, true);
    let record = Standardization {
        x_mean,
        x_scale,
        y_mean,
        y_scale,
    };
    let x = record
        .apply_x(&data.x)
        .expect("column count matches by construction");
    let y = record.apply_y(&data.y);
    (
        Dataset {
            x,
            y,
            standardization: Some(record.clone()),
        },
        record,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    Rbf,
    Linear,
    Polynomial,
}

/// Basis / covariance function and its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub lengthscale: f64,
    pub degree: u32,
    pub include_bias: bool,
    pub signal_variance: f64,
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec {
            family: KernelFamily::Rbf,
            lengthscale: 1.0,
            degree: 2,
            include_bias: true,
            signal_variance: 1.0,
        }
    }
}

impl KernelSpec {
    pub fn rbf(lengthscale: f64) -> Self {
        KernelSpec {
            lengthscale,
            ..Default::default()
        }
    }

    pub fn linear() -> Self {
        KernelSpec {
            family: KernelFamily::Linear,
            ..Default::default()
        }
    }

    pub fn polynomial(degree: u32) -> Self {
        KernelSpec {
            family: KernelFamily::Polynomial,
            degree,
            ..Default::default()
        }
    }

    pub fn with_bias(mut self, include_bias: bool) -> Self {
        self.include_bias = include_bias;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lengthscale > 0.0) || !self.lengthscale.is_finite() {
            return Err(HrvmError::InvalidParameter(format!(
                "lengthscale must be positive and finite, got {}",
                self.lengthscale
            )));
        }
        if self.degree < 1 {
            return Err(HrvmError::InvalidParameter(
                "polynomial degree must be >= 1".into(),
            ));
        }
        if !(self.signal_variance > 0.0) || !self.signal_variance.is_finite() {
            return Err(HrvmError::InvalidParameter(format!(
                "signal variance must be positive and finite, got {}",
                self.signal_variance
            )));
        }
        Ok(())
    }

    /// Unchecked evaluation on equal-length slices.
    #[inline]
    pub(crate) fn eval_raw(&self, a: &[f64], b: &[f64]) -> f64 {
        match self.family {
            KernelFamily::Rbf => {
                let d2: f64 = a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum();
                (-d2 / (2.0 * self.lengthscale * self.lengthscale)).exp()
            }
            KernelFamily::Linear => a.iter().zip(b).map(|(u, v)| u * v).sum(),
            KernelFamily::Polynomial => {
                let dot: f64 = a.iter().zip(b).map(|(u, v)| u * v).sum();
                (1.0 + dot).powi(self.degree as i32)
            }
        }
    }
}

/// Evaluates the basis kernel `k(x, x2)` (no signal variance applied).
pub fn kernel_eval(kernel: &KernelSpec, x: &[f64], x2: &[f64]) -> Result<f64> {
    if x.len() != x2.len() {
        return Err(HrvmError::Dimension(format!(
            "kernel arguments of length {} and {}",
            x.len(),
            x2.len()
        )));
    }
    if x.iter().chain(x2).any(|v| !v.is_finite()) {
        return Err(HrvmError::NonFinite("kernel argument".into()));
    }
    kernel.validate()?;
    Ok(kernel.eval_raw(x, x2))
}

/// One column of the design matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisFunction {
    Bias,
    Center(Vec<f64>),
}

impl BasisFunction {
    #[inline]
    pub fn eval(&self, kernel: &KernelSpec, x: &[f64]) -> f64 {
        match self {
            BasisFunction::Bias => 1.0,
            BasisFunction::Center(c) => kernel.eval_raw(c, x),
        }
    }

    pub fn is_bias(&self) -> bool {
        matches!(self, BasisFunction::Bias)
    }
}

/// The N×M matrix `Φ[n][j] = φⱼ(xₙ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub values: DMatrix<f64>,
    pub kernel: KernelSpec,
    pub basis: Vec<BasisFunction>,
}

impl DesignMatrix {
    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn m(&self) -> usize {
        self.values.ncols()
    }

    /// Keeps only the listed columns, in the given order.
    pub fn select(&self, columns: &[usize]) -> DesignMatrix {
        DesignMatrix {
            values: self.values.select_columns(columns),
            kernel: self.kernel.clone(),
            basis: columns.iter().map(|&j| self.basis[j].clone()).collect(),
        }
    }
}

/// Evaluates a list of basis functions at the rows of `x`.
pub fn eval_basis(kernel: &KernelSpec, basis: &[BasisFunction], x: &DMatrix<f64>) -> DMatrix<f64> {
    let rows: Vec<Vec<f64>> = x.row_iter().map(|r| r.iter().copied().collect()).collect();
    DMatrix::from_fn(x.nrows(), basis.len(), |n, j| {
        basis[j].eval(kernel, &rows[n])
    })
}

/// Basis functions centered at every training input, with an optional
/// leading bias column.
pub fn build_design_matrix(data: &Dataset, kernel: &KernelSpec) -> Result<DesignMatrix> {
    kernel.validate()?;
    let mut basis = Vec::with_capacity(data.n() + 1);
    if kernel.include_bias {
        basis.push(BasisFunction::Bias);
    }
    basis.extend((0..data.n()).map(|i| BasisFunction::Center(data.row(i))));
    let values = eval_basis(kernel, &basis, &data.x);
    if values.iter().any(|v| !v.is_finite()) {
        return Err(HrvmError::NonFinite("design matrix entry".into()));
    }
    Ok(DesignMatrix {
        values,
        kernel: kernel.clone(),
        basis,
    })
}

/// GP prior on the log noise variance: `g ~ GP(mu0·1, K_g)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpNoisePrior {
    pub mu0: f64,
    /// Covariance family, lengthscale and signal variance of `K_g`.
    pub kernel: KernelSpec,
    pub jitter: f64,
}

impl GpNoisePrior {
    /// Rbf covariance with jitter `1e-6 · signal_variance`.
    pub fn new(mu0: f64, lengthscale: f64, signal_variance: f64) -> Self {
        GpNoisePrior {
            mu0,
            kernel: KernelSpec {
                lengthscale,
                signal_variance,
                include_bias: false,
                ..Default::default()
            },
            jitter: 1e-6 * signal_variance,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        if !(self.jitter > 0.0) || !self.jitter.is_finite() {
            return Err(HrvmError::InvalidParameter(format!(
                "jitter must be positive, got {}",
                self.jitter
            )));
        }
        if !self.mu0.is_finite() {
            return Err(HrvmError::NonFinite("mu0".into()));
        }
        Ok(())
    }

    /// `signal_variance · k(a, b)` without jitter.
    #[inline]
    pub fn cross(&self, a: &[f64], b: &[f64]) -> f64 {
        self.kernel.signal_variance * self.kernel.eval_raw(a, b)
    }

    /// `K_g` without the positive-definiteness check.
    pub(crate) fn covariance_unchecked(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let rows: Vec<Vec<f64>> = x.row_iter().map(|r| r.iter().copied().collect()).collect();
        let n = rows.len();
        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v = self.cross(&rows[i], &rows[j]);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
            k[(i, i)] += self.jitter;
        }
        k
    }

    /// `∂K_g/∂ log(lengthscale)`; zero unless the family is rbf.
    pub(crate) fn covariance_dlog_lengthscale(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let n = x.nrows();
        if self.kernel.family != KernelFamily::Rbf {
            return DMatrix::zeros(n, n);
        }
        let rows: Vec<Vec<f64>> = x.row_iter().map(|r| r.iter().copied().collect()).collect();
        let l2 = self.kernel.lengthscale * self.kernel.lengthscale;
        DMatrix::from_fn(n, n, |i, j| {
            let d2: f64 = rows[i]
                .iter()
                .zip(&rows[j])
                .map(|(u, v)| (u - v) * (u - v))
                .sum();
            self.kernel.signal_variance * (-d2 / (2.0 * l2)).exp() * d2 / l2
        })
    }
}

/// `K_g[i][j] = signal_variance·k(xᵢ, xⱼ) + jitter·𝟙[i = j]`, verified positive
/// definite by factorization.
pub fn gp_covariance(x: &DMatrix<f64>, prior: &GpNoisePrior) -> Result<DMatrix<f64>> {
    prior.validate()?;
    let k = prior.covariance_unchecked(x);
    Cholesky::new(&k)?;
    Ok(k)
}

/// Median of all pairwise Euclidean distances between distinct rows
/// (1.0 when every pair coincides or N < 2).
pub fn median_pairwise_distance(x: &DMatrix<f64>) -> f64 {
    let n = x.nrows();
    let mut d = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            d.push((x.row(i) - x.row(j)).norm());
        }
    }
    d.retain(|v| *v > 0.0);
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = d.len();
    if m % 2 == 1 {
        d[m / 2]
    } else {
        0.5 * (d[m / 2 - 1] + d[m / 2])
    }
}
