//! First-order hypergradients for constrained convex optimization layers.
//!
//! A lower-level problem `min_y g(x, y) s.t. h(x, y) <= 0, e(x, y) = 0` is
//! described by the [`BilevelProblem`] trait. Given an upstream gradient
//! `c = dF/dy*`, the crate estimates `(dy*/dx)^T c` without factorizing the
//! full KKT system: the active inequalities are frozen into a linearized
//! equality-constrained *ghost* problem, which is then perturbed by `delta * c^T y`
//! and differenced through its Lagrangian ([`hypergradient::ffo_hypergradient`]).
//!
//! Two exact oracles are provided as ground truth: full KKT implicit
//! differentiation and the metric-projection form of the equality-constrained
//! Jacobian. A randomized constraint-perturbation estimator
//! ([`smoothed::smoothed_hypergradient`]) covers points where the active set is
//! ambiguous, and [`trainer`] runs plain gradient descent over the two
//! benchmark tasks (synthetic decision-focused learning and Sudoku).

pub mod active_set;
pub mod error;
pub mod experiments;
pub mod hypergradient;
pub mod linalg;
pub mod parallel;
pub mod problem;
pub mod smoothed;
pub mod solver;
pub mod trainer;

pub use active_set::{build_ghost, identify_active, ActiveSet, GhostProblem};
pub use error::{Error, Result};
pub use hypergradient::{
    exact_hypergradient, exact_jacobian, ffo_hypergradient, HypergradientReport,
};
pub use parallel::Execution;
pub use problem::{BilevelProblem, ConstraintParamLp, ParametricQp, Preset};
pub use solver::{kkt_residual, solve_eqp, solve_lower, PrimalDualSolution, SolverConfig};

/// Dense column vector used throughout the crate.
pub type Vector = nalgebra::DVector<f64>;
/// Dense matrix used throughout the crate.
pub type Matrix = nalgebra::DMatrix<f64>;
