//! Cholesky-based solves and log-determinants.

use nalgebra::{DMatrix, DVector};

use crate::error::{HrvmError, Result};

/// Lower-triangular Cholesky factor `L` with `A = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: DMatrix<f64>,
}

impl Cholesky {
    /// Factorizes a symmetric matrix, reading only its lower triangle.
    ///
    /// Fails with the index of the first pivot that is not strictly positive.
    pub fn new(a: &DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(HrvmError::Dimension(format!(
                "cholesky of a {}x{} matrix",
                n,
                a.ncols()
            )));
        }
        let mut l = DMatrix::<f64>::zeros(n, n);
        for j in 0..n {
            let mut d = a[(j, j)];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(HrvmError::NotPositiveDefinite { pivot: j });
            }
            let djj = d.sqrt();
            l[(j, j)] = djj;
            for i in (j + 1)..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / djj;
            }
        }
        Ok(Cholesky { l })
    }

    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    /// `log|A| = 2 Σ log Lᵢᵢ`.
    pub fn logdet(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// Solves `L x = b`.
    pub fn solve_lower(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.l
            .solve_lower_triangular(b)
            .expect("cholesky factor has a positive diagonal")
    }

    pub fn solve_lower_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.l
            .solve_lower_triangular(b)
            .expect("cholesky factor has a positive diagonal")
    }

    /// Solves `A X = B`.
    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let z = self.solve_lower(b);
        self.l
            .tr_solve_lower_triangular(&z)
            .expect("cholesky factor has a positive diagonal")
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let z = self.solve_lower_vec(b);
        self.l
            .tr_solve_lower_triangular(&z)
            .expect("cholesky factor has a positive diagonal")
    }

    /// Explicit `A⁻¹`. Used where the full inverse is itself the quantity of
    /// interest (posterior covariances), never inside bound evaluations.
    pub fn inverse(&self) -> DMatrix<f64> {
        let n = self.dim();
        let inv = self.solve(&DMatrix::identity(n, n));
        symmetrize(inv)
    }

    /// `diag(A⁻¹)` from `L⁻¹`.
    pub fn inverse_diagonal(&self) -> DVector<f64> {
        let n = self.dim();
        let linv = self.solve_lower(&DMatrix::identity(n, n));
        DVector::from_iterator(n, (0..n).map(|j| linv.column(j).norm_squared()))
    }
}

/// Returns `(A + Aᵀ) / 2`.
pub fn symmetrize(mut a: DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
    a
}

pub(crate) fn check_symmetric(a: &DMatrix<f64>, tol: f64) -> Result<()> {
    if a.nrows() != a.ncols() {
        return Err(HrvmError::Dimension(format!(
            "expected a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let scale = a.amax().max(1.0);
    for i in 0..a.nrows() {
        for j in (i + 1)..a.ncols() {
            if (a[(i, j)] - a[(j, i)]).abs() > tol * scale {
                return Err(HrvmError::InvalidParameter(format!(
                    "matrix not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    Ok(())
}

/// Solves `A X = B` for symmetric positive definite `A` and returns `(X, log|A|)`.
pub fn psd_solve_logdet(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    check_symmetric(a, 1e-10)?;
    if b.nrows() != a.nrows() {
        return Err(HrvmError::Dimension(format!(
            "right-hand side has {} rows, matrix has {}",
            b.nrows(),
            a.nrows()
        )));
    }
    let chol = Cholesky::new(a)?;
    Ok((chol.solve(b), chol.logdet()))
}

/// `log N(y | 0, C)` through a Cholesky factor of `C`.
pub fn gaussian_logpdf_zero_mean(chol: &Cholesky, y: &DVector<f64>) -> f64 {
    let z = chol.solve_lower_vec(y);
    let n = y.len() as f64;
    -0.5 * (n * (2.0 * std::f64::consts::PI).ln() + chol.logdet() + z.norm_squared())
}
