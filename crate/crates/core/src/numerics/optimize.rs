//! Limited-memory BFGS ascent with a backtracking (Armijo) line search.

use std::collections::VecDeque;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsSettings {
    pub max_iter: usize,
    pub memory: usize,
    /// Stop when the gradient infinity norm falls below this.
    pub grad_tol: f64,
    /// Stop when the relative objective gain of an iteration falls below this.
    pub rel_tol: f64,
    pub max_backtracks: usize,
    /// Largest allowed step in any coordinate.
    pub max_step: f64,
}

impl Default for LbfgsSettings {
    fn default() -> Self {
        LbfgsSettings {
            max_iter: 20,
            memory: 8,
            grad_tol: 1e-6,
            rel_tol: 1e-12,
            max_backtracks: 30,
            max_step: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LbfgsStatus {
    Converged,
    MaxIter,
    LineSearchFailed,
}

#[derive(Debug, Clone)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub status: LbfgsStatus,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Maximizes `f`, which returns `None` where the objective is undefined.
///
/// Every accepted step strictly increases the objective, so the returned
/// value is never below `f(x0)`.
pub fn maximize<F>(mut f: F, x0: &[f64], settings: &LbfgsSettings) -> Option<LbfgsResult>
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let (mut value, mut grad) = f(x0)?;
    let mut x = x0.to_vec();
    let n = x.len();
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut status = LbfgsStatus::MaxIter;
    let mut iterations = 0;

    for _ in 0..settings.max_iter {
        if grad.iter().fold(0.0f64, |m, g| m.max(g.abs())) < settings.grad_tol {
            status = LbfgsStatus::Converged;
            break;
        }
        // two-loop recursion on the negated objective; q holds its gradient
        let mut q: Vec<f64> = grad.iter().map(|g| -g).collect();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y, rho) in history.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        let gamma = match history.back() {
            Some((s, y, _)) => dot(s, y) / dot(y, y),
            None => (1.0 / dot(&grad, &grad).sqrt()).min(1.0),
        };
        q.iter_mut().for_each(|qi| *qi *= gamma);
        for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&grad, &dir);
        if !(slope > 0.0) {
            history.clear();
            dir = grad.clone();
            let gnorm = dot(&grad, &grad).sqrt();
            dir.iter_mut().for_each(|d| *d /= gnorm.max(1.0));
            slope = dot(&grad, &dir);
        }
        let biggest = dir.iter().fold(0.0f64, |m, d| m.max(d.abs()));
        if biggest > settings.max_step {
            let shrink = settings.max_step / biggest;
            dir.iter_mut().for_each(|d| *d *= shrink);
            slope *= shrink;
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..settings.max_backtracks {
            let trial: Vec<f64> = x.iter().zip(&dir).map(|(xi, di)| xi + step * di).collect();
            if let Some((v, g)) = f(&trial) {
                if v.is_finite() && v >= value + 1e-4 * step * slope && v > value {
                    accepted = Some((trial, v, g));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((x_new, v_new, g_new)) = accepted else {
            status = LbfgsStatus::LineSearchFailed;
            break;
        };
        iterations += 1;
        let s: Vec<f64> = (0..n).map(|i| x_new[i] - x[i]).collect();
        let y: Vec<f64> = (0..n).map(|i| grad[i] - g_new[i]).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() {
            history.push_back((s, y, 1.0 / sy));
            if history.len() > settings.memory {
                history.pop_front();
            }
        }
        let gain = v_new - value;
        x = x_new;
        value = v_new;
        grad = g_new;
        if gain <= settings.rel_tol * (1.0 + value.abs()) {
            status = LbfgsStatus::Converged;
            break;
        }
    }
    Some(LbfgsResult {
        x,
        value,
        grad,
        iterations,
        status,
    })
}
