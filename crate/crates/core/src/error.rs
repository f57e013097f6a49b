use thiserror::Error;

use crate::solver::PrimalDualSolution;

/// Errors raised by problem construction, the inner solvers and the oracles.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("unknown preset `{0}`")]
    UnknownPreset(String),

    #[error("lower-level problem is infeasible: {0}")]
    Infeasible(String),

    #[error("solver hit max_iter={max_iter} without certifying (best residual {residual:.3e})")]
    MaxIterExceeded {
        max_iter: usize,
        residual: f64,
        best: Box<PrimalDualSolution>,
    },

    #[error("lower-level objective is not strongly convex at the current iterate")]
    NotStronglyConvex,

    #[error("constraint matrix is rank deficient (pivot {pivot:.3e} below threshold {threshold:.3e})")]
    RankDeficient { pivot: f64, threshold: f64 },

    #[error("solution residual {residual:.3e} exceeds the certification bound {bound:.3e}")]
    UncertifiedSolution { residual: f64, bound: f64 },

    #[error("active constraint gradients are linearly dependent (sigma_min {sigma_min:.3e})")]
    LicqViolation { sigma_min: f64 },

    #[error("active set is degenerate (strict complementarity fails at {0:?})")]
    DegenerateActiveSet(Vec<usize>),

    #[error("KKT Jacobian is singular: {0}")]
    SingularKkt(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch {
            context,
            expected,
            actual,
        });
    }
    Ok(())
}
