//! Test-time refinement of a predictor's outputs. Given initial scores and
//! auxiliary per-instance feature sets, the library strengthens the
//! statistical dependence between the scores and the features by gradient
//! descent on a kernel-embedding objective, with a low-rank path for large n,
//! validation-gated termination, and Laplacian-based baselines for comparison.

pub mod baselines;
pub mod denoiser;
pub mod error;
pub mod experiments;
pub mod kernels;
pub mod lowrank;
pub mod ranking;
pub mod types;

pub use error::{Result, TupiError};
