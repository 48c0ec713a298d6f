//! Gauss–Hermite rules for expectations under the standard normal density.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{HrvmError, Result};

/// Default rule size for oracle integrations and EP tilted moments.
pub const DEFAULT_ORDER: usize = 32;

/// Nodes and weights with `Σ wᵢ f(xᵢ) ≈ E[f(Z)]`, `Z ~ N(0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Quadrature {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

/// Evaluates the orthonormal (probabilists') Hermite polynomials `p_{n-1}(x)`
/// and `p_n(x)` by the three-term recurrence.
fn hermite_pair(n: usize, x: f64) -> (f64, f64) {
    let mut prev = 0.0;
    let mut cur = 1.0;
    for k in 0..n {
        let kf = k as f64;
        let next = (x * cur - kf.sqrt() * prev) / (kf + 1.0).sqrt();
        prev = cur;
        cur = next;
    }
    (prev, cur)
}

/// Builds an `n`-point rule, exact for polynomials up to degree `2n − 1`.
///
/// Nodes come from the symmetric Jacobi matrix (Golub–Welsch), are polished
/// by Newton steps on `p_n`, and weights use the Christoffel form
/// `wᵢ = 1 / Σₖ pₖ(xᵢ)²`.
pub fn gauss_hermite(n: usize) -> Result<Quadrature> {
    if !(1..=128).contains(&n) {
        return Err(HrvmError::InvalidParameter(format!(
            "gauss_hermite order {n} outside 1..=128"
        )));
    }
    let mut jacobi = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let b = (k as f64).sqrt();
        jacobi[(k - 1, k)] = b;
        jacobi[(k, k - 1)] = b;
    }
    let mut nodes: Vec<f64> = SymmetricEigen::new(jacobi)
        .eigenvalues
        .iter()
        .copied()
        .collect();
    nodes.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let sqrt_n = (n as f64).sqrt();
    for x in nodes.iter_mut() {
        for _ in 0..4 {
            let (pm1, pn) = hermite_pair(n, *x);
            let step = pn / (sqrt_n * pm1);
            if !step.is_finite() {
                break;
            }
            *x -= step;
            if step.abs() < 1e-15 * (1.0 + x.abs()) {
                break;
            }
        }
    }
    // enforce exact symmetry about zero
    for i in 0..n / 2 {
        let j = n - 1 - i;
        let v = 0.5 * (nodes[j] - nodes[i]);
        nodes[i] = -v;
        nodes[j] = v;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }

    let mut weights: Vec<f64> = nodes
        .iter()
        .map(|&x| {
            let mut prev = 0.0;
            let mut cur = 1.0;
            let mut sum = 1.0;
            for k in 0..n - 1 {
                let kf = k as f64;
                let next = (x * cur - kf.sqrt() * prev) / (kf + 1.0).sqrt();
                prev = cur;
                cur = next;
                sum += cur * cur;
            }
            1.0 / sum
        })
        .collect();
    for i in 0..n / 2 {
        let j = n - 1 - i;
        let w = 0.5 * (weights[i] + weights[j]);
        weights[i] = w;
        weights[j] = w;
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);

    Ok(Quadrature { nodes, weights })
}

impl Quadrature {
    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// `E[f(Z)]` for `Z ~ N(0, 1)`.
    pub fn expect<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(x))
            .sum()
    }

    /// `E[f(X)]` for `X ~ N(mean, var)`.
    pub fn expect_normal<F: Fn(f64) -> f64>(&self, mean: f64, var: f64, f: F) -> f64 {
        let sd = var.max(0.0).sqrt();
        self.expect(|z| f(mean + sd * z))
    }
}

/// Mean of `e^Z` for `Z ~ N(mu, var)`.
pub fn lognormal_mean(mu: f64, var: f64) -> f64 {
    (mu + 0.5 * var).exp()
}
