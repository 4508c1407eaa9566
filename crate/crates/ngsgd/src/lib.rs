//! Natural-gradient SGD for small feed-forward classifiers, with
//! parameter-averaging parallel training and the supporting data tooling.
//!
//! The crate is organized around the pieces of that training stack:
//!
//! * [`ng`]: the two Fisher-preconditioners that turn raw minibatch
//!   gradients into rescaled, better-conditioned update directions. The
//!   `simple` variant re-estimates its smoothed factor from each minibatch;
//!   the `online` variant maintains a low-rank-plus-identity running factor.
//! * [`nnet`]: feed-forward networks (ReLU / p-norm hidden layers, softmax
//!   output) with the forward/backprop plumbing the trainer needs.
//! * [`train`]: the single-stream SGD loop: learning-rate schedule,
//!   per-minibatch max-change guard, preconditioner state management.
//! * [`parallel`]: multi-worker training with periodic parameter averaging,
//!   plus L-BFGS combination of trailing checkpoints.
//! * [`data`]: synthetic dataset generation, block randomization, the
//!   byte-quantized example container, and an LDA-based input transform.
//! * [`verify`]: a self-check battery that replays the fast preconditioner
//!   paths against brute-force references and finite differences.
//!
//! Numeric element type is generic over [`Scalar`] (`f32` for training,
//! `f64` in oracle tests).

pub mod data;
pub mod error;
pub mod linalg;
pub mod ng;
pub mod nnet;
pub mod opt;
pub mod parallel;
pub mod scalar;
pub mod train;
pub mod verify;

pub use error::{NgError, Result};
pub use linalg::Mat;
pub use scalar::Scalar;
