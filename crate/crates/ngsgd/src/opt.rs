//! Limited-memory BFGS minimization.
//!
//! Standard two-loop recursion over a short history of (step, gradient
//! change) pairs, scaled by the latest pair's curvature. The line search
//! brackets a weak-Wolfe step: backtrack by bisection when the Armijo
//! decrease fails, extend when the step is so short that the directional
//! derivative barely changed. Enforcing the curvature side keeps the stored
//! pairs well-posed; with plain backtracking the inverse-Hessian scale can
//! collapse and the iteration crawls. Pairs with nonpositive curvature are
//! dropped rather than damped; if the two-loop direction ever fails to be a
//! descent direction the history is discarded and the step falls back to
//! steepest descent.

use ndarray::Array1;
use std::collections::VecDeque;

use crate::error::{NgError, Result};

#[derive(Debug, Clone, Copy)]
pub struct LbfgsOptions {
    pub history: usize,
    pub max_iters: usize,
    /// Stop when ||grad|| <= grad_tol * max(1, ||x||).
    pub grad_tol: f64,
    /// Armijo sufficient-decrease constant.
    pub c1: f64,
    /// Weak-Wolfe curvature constant.
    pub c2: f64,
    /// Trial evaluations per line search.
    pub max_line_search: usize,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        LbfgsOptions {
            history: 10,
            max_iters: 100,
            grad_tol: 1e-8,
            c1: 1e-4,
            c2: 0.9,
            max_line_search: 30,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LbfgsOutcome {
    pub x: Array1<f64>,
    pub f: f64,
    pub grad_norm: f64,
    pub iters: usize,
    /// False when the run stopped on the iteration cap or a stalled line
    /// search instead of the gradient test.
    pub converged: bool,
}

fn norm(v: &Array1<f64>) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Minimizes `fg`'s value by L-BFGS from `x0`; `fg` returns the objective
/// and its gradient. Every accepted step satisfies the Armijo decrease test,
/// so the returned objective never exceeds the starting one.
pub fn minimize<F>(mut fg: F, x0: &Array1<f64>, opts: &LbfgsOptions) -> Result<LbfgsOutcome>
where
    F: FnMut(&Array1<f64>) -> Result<(f64, Array1<f64>)>,
{
    if opts.history == 0 {
        return Err(NgError::InvalidArg("history must be positive".into()));
    }
    let mut x = x0.clone();
    let (mut f, mut g) = fg(&x)?;
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(NgError::NonFinite("objective at the starting point".into()));
    }
    if g.len() != x.len() {
        return Err(NgError::DimMismatch(format!(
            "gradient length {} for {} variables",
            g.len(),
            x.len()
        )));
    }
    let mut hist: VecDeque<(Array1<f64>, Array1<f64>, f64)> = VecDeque::new();
    let mut iters = 0usize;
    let mut converged = false;
    while iters < opts.max_iters {
        if norm(&g) <= opts.grad_tol * norm(&x).max(1.0) {
            converged = true;
            break;
        }
        let mut dir = {
            let mut q = g.clone();
            let mut alphas = Vec::with_capacity(hist.len());
            for (s, y, rho) in hist.iter().rev() {
                let a = rho * s.dot(&q);
                q.scaled_add(-a, y);
                alphas.push(a);
            }
            if let Some((s, y, _)) = hist.back() {
                q *= s.dot(y) / y.dot(y);
            }
            for ((s, y, rho), a) in hist.iter().zip(alphas.into_iter().rev()) {
                let b = rho * y.dot(&q);
                q.scaled_add(a - b, s);
            }
            -q
        };
        let mut dd = g.dot(&dir);
        if !(dd < 0.0) {
            hist.clear();
            dir = -&g;
            dd = -g.dot(&g);
        }
        let mut lo = 0.0f64;
        let mut hi = f64::INFINITY;
        let mut step = 1.0f64;
        let mut accepted = None;
        let mut fallback = None;
        for _ in 0..opts.max_line_search {
            let x_new = &x + &(&dir * step);
            let (f_new, g_new) = fg(&x_new)?;
            if !(f_new.is_finite() && f_new <= f + opts.c1 * step * dd) {
                hi = step;
            } else if g_new.dot(&dir) < opts.c2 * dd {
                if fallback.as_ref().map_or(true, |&(_, ff, _): &(_, f64, _)| f_new < ff) {
                    fallback = Some((x_new, f_new, g_new));
                }
                lo = step;
            } else {
                accepted = Some((x_new, f_new, g_new));
                break;
            }
            step = if hi.is_finite() { 0.5 * (lo + hi) } else { 2.0 * step };
        }
        let Some((x_new, f_new, g_new)) = accepted.or(fallback) else {
            break;
        };
        let s = &x_new - &x;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * norm(&s) * norm(&y) {
            hist.push_back((s, y, 1.0 / sy));
            while hist.len() > opts.history {
                hist.pop_front();
            }
        }
        x = x_new;
        f = f_new;
        g = g_new;
        iters += 1;
    }
    let grad_norm = norm(&g);
    Ok(LbfgsOutcome { x, f, grad_norm, iters, converged })
}
