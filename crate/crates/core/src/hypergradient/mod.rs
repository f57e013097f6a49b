//! Hypergradient oracles.
//!
//! [`ffo_hypergradient`] is the first-order estimator: it freezes the active
//! set into a [`GhostProblem`], re-solves the ghost with the objective tilted
//! by `delta * c^T y`, and differences the ghost Lagrangian's `x`-gradient
//! between the two solutions. No second derivative is evaluated.
//!
//! [`exact_jacobian`] (full KKT implicit differentiation) and
//! [`projection_jacobian`] (metric projection onto the ghost constraint
//! nullspace) are independent exact references.

mod exact;
mod projection;

use std::time::Instant;

use serde::Serialize;

pub use exact::{exact_hypergradient, exact_hypergradient_at, exact_jacobian};
pub use projection::{project_metric_nullspace, projection_jacobian, MetricProjector};

use crate::active_set::{build_ghost_with, identify_active, tol_act_for, ActiveSet, GhostOptions, GhostProblem};
use crate::error::{check_dim, Error, Result};
use crate::linalg::pinv_solve;
use crate::problem::serde_matrix::vector;
use crate::problem::BilevelProblem;
use crate::solver::{solve_lower, PrimalDualSolution, SolverConfig};
use crate::{Matrix, Vector};

/// Inner tolerances are never requested below this.
pub const INNER_TOL_FLOOR: f64 = 1e-13;

/// Range allowed for the perturbation size.
pub const DELTA_MIN: f64 = 1e-8;
pub const DELTA_MAX: f64 = 1e-2;

#[derive(Debug, Clone, Default, Serialize)]
pub struct Timings {
    pub forward: f64,
    pub perturbed: f64,
    pub assembly: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct HypergradientReport {
    #[serde(with = "vector")]
    pub grad: Vector,
    #[serde(with = "vector")]
    pub v_x: Vector,
    #[serde(with = "vector")]
    pub direct_term: Vector,
    pub delta: f64,
    pub active: ActiveSet,
    pub timings: Timings,
    /// Both inner solves met tolerance, the active set was unambiguous and
    /// the frozen constraints satisfied LICQ.
    pub certified: bool,
}

/// Ghost objective tilted by a linear term.
struct Perturbed<'g, 'a> {
    ghost: &'g GhostProblem<'a>,
    lin: Vector,
}

impl BilevelProblem for Perturbed<'_, '_> {
    fn dim_y(&self) -> usize {
        self.ghost.dim_y()
    }
    fn dim_x(&self) -> usize {
        self.ghost.dim_x()
    }
    fn n_ineq(&self) -> usize {
        0
    }
    fn n_eq(&self) -> usize {
        self.ghost.n_eq()
    }
    fn mu_g(&self) -> f64 {
        self.ghost.mu_g()
    }
    fn g_value(&self, x: &Vector, y: &Vector) -> f64 {
        self.ghost.g_value(x, y) + self.lin.dot(y)
    }
    fn g_grad_y(&self, x: &Vector, y: &Vector) -> Vector {
        self.ghost.g_grad_y(x, y) + &self.lin
    }
    fn g_grad_x(&self, x: &Vector, y: &Vector) -> Vector {
        self.ghost.g_grad_x(x, y)
    }
    fn g_hess_yy(&self, x: &Vector, y: &Vector) -> Matrix {
        self.ghost.g_hess_yy(x, y)
    }
    fn g_hess_yx(&self, x: &Vector, y: &Vector) -> Matrix {
        self.ghost.g_hess_yx(x, y)
    }
    fn h_values(&self, x: &Vector, y: &Vector) -> Vector {
        self.ghost.h_values(x, y)
    }
    fn h_jac_y(&self, x: &Vector, y: &Vector) -> Matrix {
        self.ghost.h_jac_y(x, y)
    }
    fn h_jac_x(&self, x: &Vector, y: &Vector) -> Matrix {
        self.ghost.h_jac_x(x, y)
    }
    fn e_values(&self, x: &Vector, y: &Vector) -> Vector {
        self.ghost.e_values(x, y)
    }
    fn e_jac_y(&self, x: &Vector, y: &Vector) -> Matrix {
        self.ghost.e_jac_y(x, y)
    }
    fn e_jac_x(&self, x: &Vector, y: &Vector) -> Matrix {
        self.ghost.e_jac_x(x, y)
    }
}

/// Solves `min g~(x, y) + delta c^T y` over the frozen constraints,
/// warm-started at the ghost's base point. Multipliers are in `nu`.
pub fn solve_perturbed(
    ghost: &GhostProblem<'_>,
    x: &Vector,
    c: &Vector,
    delta: f64,
    cfg: &SolverConfig,
) -> Result<PrimalDualSolution> {
    check_dim("c", ghost.dim_y(), c.len())?;
    if !(delta > 0.0) {
        return Err(Error::InvalidArgument(format!("delta must be positive, got {delta}")));
    }
    let problem = Perturbed {
        ghost,
        lin: delta * c,
    };
    let warm = PrimalDualSolution {
        y: ghost.base_y.clone(),
        lambda: Vector::zeros(0),
        nu: Vector::zeros(ghost.n_eq()),
        stationarity_residual: f64::INFINITY,
        comp_slack_residual: 0.0,
        feas_residual: 0.0,
        iterations: 0,
        wall_time: 0.0,
    };
    let cfg = SolverConfig {
        warm_start: Some(warm),
        ..cfg.clone()
    };
    solve_lower(&problem, x, &cfg)
}

fn least_squares_dual(ghost: &GhostProblem<'_>, x: &Vector, y: &Vector, perturbation: Option<(&Vector, f64)>) -> Vector {
    let mut grad = ghost.g_grad_y(x, y);
    if let Some((c, delta)) = perturbation {
        grad.axpy(delta, c, 1.0);
    }
    -pinv_solve(&ghost.b_tilde.transpose(), &grad)
}

/// `-(B^T)^+ grad_y [g~(x, y) + delta c^T y]`, the least-squares multiplier
/// of the frozen constraints.
pub fn recover_dual(
    ghost: &GhostProblem<'_>,
    x: &Vector,
    y: &Vector,
    perturbation: Option<(&Vector, f64)>,
) -> Result<Vector> {
    check_dim("y", ghost.dim_y(), y.len())?;
    if let Some((c, _)) = perturbation {
        check_dim("c", ghost.dim_y(), c.len())?;
    }
    if !ghost.rank_certified {
        return Err(Error::RankDeficient {
            pivot: ghost.sigma_min,
            threshold: 1e-8 * crate::linalg::spectral_norm(&ghost.b_tilde),
        });
    }
    Ok(least_squares_dual(ghost, x, y, perturbation))
}

/// `(1/delta) (grad_x L~(x, y_delta, mult_delta) - grad_x L~(x, y0, mult0))`
/// where `L~ = g~ + mult^T h~` and `grad_x h~ = A~`.
pub fn finite_diff_vx(
    ghost: &GhostProblem<'_>,
    x: &Vector,
    y0: &Vector,
    mult0: &Vector,
    y_delta: &Vector,
    mult_delta: &Vector,
    delta: f64,
) -> Result<Vector> {
    let k = ghost.n_eq();
    check_dim("y0", ghost.dim_y(), y0.len())?;
    check_dim("y_delta", ghost.dim_y(), y_delta.len())?;
    check_dim("mult0", k, mult0.len())?;
    check_dim("mult_delta", k, mult_delta.len())?;
    let mut diff = ghost.g_grad_x(x, y_delta) - ghost.g_grad_x(x, y0);
    if k > 0 {
        diff += ghost.a_tilde.tr_mul(&(mult_delta - mult0));
    }
    Ok(diff / delta)
}

/// First-order hypergradient estimate at `x` for upstream gradient `c`.
///
/// `eps` is the target accuracy; it sets `delta = clamp(eps, 1e-8, 1e-2)`.
/// Degeneracy and rank failures are reported through `certified`, not as
/// errors.
pub fn ffo_hypergradient(
    problem: &dyn BilevelProblem,
    x: &Vector,
    c: &Vector,
    direct: &Vector,
    eps: f64,
    cfg: &SolverConfig,
) -> Result<HypergradientReport> {
    let sol = solve_lower(problem, x, cfg)?;
    ffo_hypergradient_at(problem, x, &sol, c, direct, eps, cfg)
}

/// As [`ffo_hypergradient`], reusing a lower-level solution already at hand.
pub fn ffo_hypergradient_at(
    problem: &dyn BilevelProblem,
    x: &Vector,
    sol: &PrimalDualSolution,
    c: &Vector,
    direct: &Vector,
    eps: f64,
    cfg: &SolverConfig,
) -> Result<HypergradientReport> {
    check_dim("c", problem.dim_y(), c.len())?;
    check_dim("direct", problem.dim_x(), direct.len())?;
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let delta = eps.clamp(DELTA_MIN, DELTA_MAX);
    let active = identify_active(problem, x, sol, tol_act_for(cfg.tol))?;
    let ghost = build_ghost_with(problem, x, sol, &active, GhostOptions::lenient())?;

    let started = Instant::now();
    let inner = SolverConfig {
        tol: cfg.tol.min(delta * delta * 1e-2).max(INNER_TOL_FLOOR),
        max_iter: cfg.max_iter,
        warm_start: None,
    };
    let (pert, inner_ok) = match solve_perturbed(&ghost, x, c, delta, &inner) {
        Ok(s) => (s, true),
        Err(Error::MaxIterExceeded { best, residual, .. }) => {
            log::debug!("perturbed ghost solve stopped at residual {residual:.3e}");
            (*best, false)
        }
        Err(e) => return Err(e),
    };
    let perturbed = started.elapsed().as_secs_f64();

    let started = Instant::now();
    let mult0 = least_squares_dual(&ghost, x, &sol.y, None);
    let mult_delta = least_squares_dual(&ghost, x, &pert.y, Some((c, delta)));
    let v_x = finite_diff_vx(&ghost, x, &sol.y, &mult0, &pert.y, &mult_delta, delta)?;
    let grad = &v_x + direct;
    let assembly = started.elapsed().as_secs_f64();

    let certified = inner_ok && !active.degenerate && ghost.rank_certified;
    Ok(HypergradientReport {
        grad,
        v_x,
        direct_term: direct.clone(),
        delta,
        active,
        timings: Timings {
            forward: sol.wall_time,
            perturbed,
            assembly,
        },
        certified,
    })
}
