//! Natural-gradient preconditioners.
//!
//! Both variants take a minibatch `X` (one row per sample), multiply each row
//! by the inverse of a smoothed Fisher-factor estimate, and rescale the result
//! so its Frobenius norm matches the input's. The `simple` variant estimates
//! the factor from the other rows of the same minibatch; the `online` variant
//! keeps a low-rank-plus-identity running estimate across minibatches.

pub mod online;
pub mod simple;

use crate::linalg::Mat;
use crate::scalar::Scalar;

/// Result of preconditioning one minibatch.
pub struct PrecondOutput<T: Scalar> {
    /// Preconditioned minibatch, same shape as the input.
    pub x_bar: Mat<T>,
    /// Rescale factor that restored the input's Frobenius norm.
    pub gamma: T,
    /// Squared 2-norm of each row of `x_bar` (the `p_i` values), computed as
    /// a byproduct so the max-change guard does not need a second pass.
    pub row_sq_norms: Vec<T>,
}
