//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A symmetric factorization hit a non-positive pivot.
    #[error("matrix is not positive definite ({context}: pivot {pivot:.3e})")]
    NonPositiveDefinite { context: &'static str, pivot: f64 },

    /// An iterative solver ran out of iterations.
    #[error("{what} failed to converge after {iterations} iterations (residual {residual:.3e})")]
    NoConvergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },

    /// A matrix that must be positive semidefinite is not.
    #[error("{what} is not positive semidefinite (min eigenvalue {min_eigenvalue:.3e})")]
    NotPsd {
        what: &'static str,
        min_eigenvalue: f64,
    },

    /// A covariance schedule violates the predictor/filter ordering.
    #[error("infeasible schedule at stage {stage}: min eigenvalue of ordering margin {min_eigenvalue:.3e}")]
    InfeasibleSchedule { stage: usize, min_eigenvalue: f64 },

    /// Dimension bookkeeping went wrong.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A problem file failed to parse.
    #[error("parse error: {0}")]
    Parse(String),

    /// A parsed model failed validation.
    #[error("validation error: {}", .0.join("; "))]
    Validation(Vec<String>),

    /// The scalar closed-form path was invoked on a non-conforming model.
    #[error("not a scalar two-process instance: {0}")]
    NotScalar(String),

    /// The closed-form interior solution violates the ordering constraint.
    #[error("boundary regime detected at stage {stage}: the interior solution violates the ordering constraint")]
    BoundaryRegime { stage: usize },

    /// Multiplier calibration could not bracket the target within range.
    #[error("multiplier bracketing failed for {which}: no lambda in [{lo:.1e}, {hi:.1e}] meets the budget")]
    BracketingFailure { which: &'static str, lo: f64, hi: f64 },

    /// No strictly feasible starting schedule exists for the given budgets.
    #[error("no strictly feasible start for the given budgets: {0}")]
    InfeasibleBudget(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
