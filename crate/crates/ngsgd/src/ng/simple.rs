//! Per-minibatch natural-gradient preconditioning.
//!
//! Each row x_i of the minibatch is multiplied by the inverse of a smoothed
//! Fisher factor estimated from the *other* rows:
//!
//! ```text
//!   G_i = beta I + (1/(N-1)) sum_{j != i} x_j x_j^T,
//!   beta = alpha max(tr(X^T X), eps) / (N D).
//! ```
//!
//! Forming and inverting N separate D x D matrices is wasteful; instead one
//! shared G = beta I + (1/(N-1)) X^T X is factored once, and the hold-out is
//! folded back in with a rank-one (Sherman-Morrison) correction:
//!
//! ```text
//!   Q = X G^{-1},   a_i = x_i^T q_i,   b_i = 1 + a_i / (N-1-a_i),
//!   xhat_i = b_i q_i  ( = G_i^{-1} x_i exactly, in exact arithmetic).
//! ```
//!
//! When N <= D it is cheaper to work in the row space: Q is computed as
//! (beta I + (1/(N-1)) X X^T)^{-1} X, an N x N problem, which equals the
//! column-space expression by the push-through identity.
//!
//! Finally the output is rescaled by gamma = sqrt(tr(X^T X)/tr(Xhat^T Xhat))
//! so the update keeps the Frobenius norm the raw gradient would have had.

use ndarray::{Array2, Axis};

use super::PrecondOutput;
use crate::error::{NgError, Result};
use crate::linalg::{self, Mat};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy)]
pub struct SimpleNgConfig {
    /// Identity-smoothing strength relative to the mean trace.
    pub alpha: f64,
    /// Floor applied to tr(X^T X) so beta is positive even for zero input.
    pub epsilon: f64,
}

impl Default for SimpleNgConfig {
    fn default() -> Self {
        SimpleNgConfig { alpha: 4.0, epsilon: 1e-20 }
    }
}

/// Intermediate quantities, exposed for diagnostics and tests.
pub struct SimpleWorkspace<T: Scalar> {
    pub beta: T,
    /// Smoothed Fisher G = beta I + (1/(N-1)) X^T X, D x D.
    pub g: Mat<T>,
    /// Q = X G^{-1}.
    pub q: Mat<T>,
    /// a_i = x_i^T q_i.
    pub a: Vec<T>,
    /// Hold-out correction factors b_i.
    pub b: Vec<T>,
    /// xhat_i = b_i q_i, before the gamma rescale.
    pub x_hat: Mat<T>,
}

/// beta = alpha * max(tr(X^T X), eps) / (N D).
pub fn simple_beta<T: Scalar>(x: &Mat<T>, cfg: &SimpleNgConfig) -> T {
    let (n, d) = x.dim();
    assert!(n >= 1 && d >= 1, "simple_beta needs a non-empty matrix");
    T::from_f64(beta_f64(linalg::frob_sq_f64(x), n, d, cfg))
}

fn beta_f64(trace: f64, n: usize, d: usize, cfg: &SimpleNgConfig) -> f64 {
    cfg.alpha * trace.max(cfg.epsilon) / ((n * d) as f64)
}

fn validate<T: Scalar>(x: &Mat<T>) -> Result<()> {
    if x.nrows() < 2 {
        return Err(NgError::InsufficientData(format!(
            "hold-out preconditioning needs N >= 2 rows, got {}",
            x.nrows()
        )));
    }
    if x.ncols() < 1 {
        return Err(NgError::InvalidArg("minibatch has zero columns".into()));
    }
    if !linalg::all_finite(x) {
        return Err(NgError::NonFinite("minibatch contains non-finite entries".into()));
    }
    Ok(())
}

/// Q = X G^{-1}, solved in whichever of the column/row space is smaller.
/// Strict `N > D` selects the column-space formula; ties go to row space.
fn q_matrix<T: Scalar>(x: &Mat<T>, beta: f64, force_column_space: Option<bool>) -> Result<Mat<T>> {
    let (n, d) = x.dim();
    let scale = T::from_f64(1.0 / (n as f64 - 1.0));
    let column_space = force_column_space.unwrap_or(n > d);
    if column_space {
        let mut g = x.t().dot(x) * scale;
        for i in 0..d {
            g[[i, i]] += T::from_f64(beta);
        }
        Ok(linalg::spd_solve(&g, &x.t().to_owned())?.t().to_owned())
    } else {
        let mut g = x.dot(&x.t()) * scale;
        for i in 0..n {
            g[[i, i]] += T::from_f64(beta);
        }
        linalg::spd_solve(&g, x)
    }
}

/// Hold-out correction factor; `a` is clamped away from N-1 so the
/// denominator stays positive under roundoff.
fn hold_out_b(a: f64, n: usize) -> f64 {
    let limit = (n as f64 - 1.0) * (1.0 - 1e-6);
    let a = a.min(limit);
    1.0 + a / (n as f64 - 1.0 - a)
}

fn finish<T: Scalar>(x: &Mat<T>, x_hat: Mat<T>, trace: f64) -> PrecondOutput<T> {
    debug_assert_eq!(x.dim(), x_hat.dim());
    let hat_norms = linalg::row_sq_norms_f64(&x_hat);
    let tr_hat: f64 = hat_norms.iter().sum();
    let gamma = if tr_hat == 0.0 { 1.0 } else { (trace / tr_hat).sqrt() };
    let x_bar = &x_hat * T::from_f64(gamma);
    let row_sq_norms = hat_norms.iter().map(|&p| T::from_f64(gamma * gamma * p)).collect();
    PrecondOutput { x_bar, gamma: T::from_f64(gamma), row_sq_norms }
}

fn precondition_impl<T: Scalar>(
    x: &Mat<T>,
    cfg: &SimpleNgConfig,
    flip_b_sign: bool,
) -> Result<(PrecondOutput<T>, SimpleWorkspace<T>)> {
    validate(x)?;
    let (n, _d) = x.dim();
    let trace = linalg::frob_sq_f64(x);
    let beta = beta_f64(trace, n, x.ncols(), cfg);
    let q = q_matrix(x, beta, None)?;
    let a = linalg::rowwise_dot_f64(x, &q);
    let b: Vec<f64> = a
        .iter()
        .map(|&ai| {
            let bi = hold_out_b(ai, n);
            if flip_b_sign {
                -bi
            } else {
                bi
            }
        })
        .collect();
    let mut x_hat = q.clone();
    for (mut row, &bi) in x_hat.axis_iter_mut(Axis(0)).zip(&b) {
        row *= T::from_f64(bi);
    }
    let out = finish(x, x_hat.clone(), trace);
    let ws = SimpleWorkspace {
        beta: T::from_f64(beta),
        g: full_g(x, beta),
        q,
        a: a.into_iter().map(T::from_f64).collect(),
        b: b.into_iter().map(T::from_f64).collect(),
        x_hat,
    };
    Ok((out, ws))
}

fn full_g<T: Scalar>(x: &Mat<T>, beta: f64) -> Mat<T> {
    let d = x.ncols();
    let scale = T::from_f64(1.0 / (x.nrows() as f64 - 1.0));
    let mut g = x.t().dot(x) * scale;
    for i in 0..d {
        g[[i, i]] += T::from_f64(beta);
    }
    g
}

/// Preconditions one minibatch with the per-minibatch (hold-one-out) method.
pub fn precondition_simple<T: Scalar>(x: &Mat<T>, cfg: &SimpleNgConfig) -> Result<PrecondOutput<T>> {
    validate(x)?;
    let (n, _) = x.dim();
    let trace = linalg::frob_sq_f64(x);
    let beta = beta_f64(trace, n, x.ncols(), cfg);
    let q = q_matrix(x, beta, None)?;
    let a = linalg::rowwise_dot_f64(x, &q);
    let mut x_hat = q;
    for (mut row, &ai) in x_hat.axis_iter_mut(Axis(0)).zip(&a) {
        row *= T::from_f64(hold_out_b(ai, n));
    }
    Ok(finish(x, x_hat, trace))
}

/// Like [`precondition_simple`] but also returns the intermediates.
pub fn precondition_simple_detailed<T: Scalar>(
    x: &Mat<T>,
    cfg: &SimpleNgConfig,
) -> Result<(PrecondOutput<T>, SimpleWorkspace<T>)> {
    precondition_impl(x, cfg, false)
}

/// Deliberately broken variant (sign of every b_i flipped). Exists so the
/// self-check battery can demonstrate that it detects a defective
/// implementation; never called by training code.
#[doc(hidden)]
pub fn precondition_simple_injected_fault<T: Scalar>(
    x: &Mat<T>,
    cfg: &SimpleNgConfig,
) -> Result<PrecondOutput<T>> {
    precondition_impl(x, cfg, true).map(|(out, _)| out)
}

/// Reference implementation: forms and inverts every held-out Fisher factor
/// G_i explicitly, one D x D solve per row. Quadratically more expensive than
/// [`precondition_simple`]; kept as the ground truth the fast path is tested
/// against, and run by the `verify` battery.
pub fn precondition_simple_oracle<T: Scalar>(
    x: &Mat<T>,
    cfg: &SimpleNgConfig,
) -> Result<PrecondOutput<T>> {
    validate(x)?;
    let (n, d) = x.dim();
    let trace = linalg::frob_sq_f64(x);
    let beta = beta_f64(trace, n, x.ncols(), cfg);
    let scale = 1.0 / (n as f64 - 1.0);
    let mut x_hat: Mat<T> = Array2::zeros((n, d));
    for i in 0..n {
        let mut g = Array2::<f64>::zeros((d, d));
        for j in 0..n {
            if j == i {
                continue;
            }
            for r in 0..d {
                for c in 0..d {
                    g[[r, c]] += scale * x[[j, r]].as_f64() * x[[j, c]].as_f64();
                }
            }
        }
        for r in 0..d {
            g[[r, r]] += beta;
        }
        let xi = Array2::from_shape_fn((d, 1), |(r, _)| x[[i, r]].as_f64());
        let solved = linalg::spd_solve(&g, &xi)?;
        for r in 0..d {
            x_hat[[i, r]] = T::from_f64(solved[[r, 0]]);
        }
    }
    Ok(finish(x, x_hat, trace))
}

/// Computes Q = X G^{-1} twice, forcing the column-space and row-space
/// formulas in turn. Used by the `verify` battery to check that the two
/// algebraically equivalent solves agree numerically.
#[doc(hidden)]
pub fn q_both_branches<T: Scalar>(x: &Mat<T>, cfg: &SimpleNgConfig) -> Result<(Mat<T>, Mat<T>)> {
    validate(x)?;
    let beta = beta_f64(linalg::frob_sq_f64(x), x.nrows(), x.ncols(), cfg);
    let column = q_matrix(x, beta, Some(true))?;
    let row = q_matrix(x, beta, Some(false))?;
    Ok((column, row))
}
