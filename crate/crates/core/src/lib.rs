//! Solver for the joint nonanticipative rate-distortion function (NRDF) of
//! a tuple of Gauss-Markov processes under two individual mean-square-error
//! distortion budgets.
//!
//! The crate computes the minimal causal-coding rate, synthesizes the
//! test-channel realization that attains it, and verifies every claim
//! numerically: an independent barrier-method minimizer bounds the
//! closed-form path, and Monte-Carlo simulation checks the conditional-mean,
//! distortion, and causality properties of the realization.
//!
//! Modules:
//! - [`numerics`]: dense symmetric-matrix primitives (Jacobi eigen,
//!   Cholesky, pseudoinverse, the backward matrix quadratic).
//! - [`model`]: the Gauss-Markov tuple, budgets, and problem-file I/O.
//! - [`realization`]: covariance chains and test-channel synthesis.
//! - [`kkt`]: the interior-regime solver, multiplier calibration, the
//!   scalar closed form, and the per-unit-time limit.
//! - [`oracle`]: direct minimization of the rate objective (ground truth).
//! - [`simulate`]: reproducible Monte-Carlo validation.

pub mod error;
pub mod kkt;
pub mod model;
pub mod numerics;
pub mod oracle;
pub mod realization;
pub mod simulate;

pub use error::{Error, Result};
