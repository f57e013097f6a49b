//! Active-set identification and the linearized equality-constrained "ghost"
//! problem built around a lower-level solution.

use serde::{Serialize, Serializer};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{min_singular_value, spectral_norm};
use crate::problem::BilevelProblem;
use crate::solver::PrimalDualSolution;
use crate::{Matrix, Vector};

/// Default classification band; solver tolerance 1e-10 sits near its square.
pub const DEFAULT_TOL_ACT: f64 = 1e-6;

/// Residual bound required of a solution before classifying it.
pub fn certification_bound(tol_act: f64) -> f64 {
    100.0 * tol_act * tol_act
}

/// Band width matched to a solver tolerance.
pub fn tol_act_for(solver_tol: f64) -> f64 {
    DEFAULT_TOL_ACT.max(solver_tol.sqrt() / 10.0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ActiveSet {
    /// Sorted indices of the inequalities treated as active.
    pub indices: Vec<usize>,
    /// `min_i max(lambda_i, -h_i)`, infinite without inequalities.
    #[serde(serialize_with = "finite_or_null")]
    pub margin: f64,
    /// Some constraint has both `|h_i|` and `lambda_i` inside the band.
    pub degenerate: bool,
    /// Constraints that fell inside the band.
    pub ambiguous: Vec<usize>,
}

pub(crate) fn finite_or_null<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_none()
    }
}

/// Classifies each inequality as active or inactive.
///
/// `lambda_i > tol_act` means active, `-h_i > tol_act` inactive. When both
/// signals sit inside the band the constraint is active iff
/// `lambda_i >= -h_i`, and the set is flagged degenerate.
pub fn identify_active(
    problem: &dyn BilevelProblem,
    x: &Vector,
    sol: &PrimalDualSolution,
    tol_act: f64,
) -> Result<ActiveSet> {
    check_dim("lambda", problem.n_ineq(), sol.lambda.len())?;
    let bound = certification_bound(tol_act);
    let (s, c, f) = crate::solver::kkt_residual(problem, x, sol)?;
    let residual = s.max(c).max(f);
    if residual > bound {
        return Err(Error::UncertifiedSolution { residual, bound });
    }
    let m = problem.n_ineq();
    let h = if m > 0 {
        problem.h_values(x, &sol.y)
    } else {
        Vector::zeros(0)
    };
    let mut indices = Vec::new();
    let mut ambiguous = Vec::new();
    let mut margin = f64::INFINITY;
    for i in 0..m {
        let (lam, slack) = (sol.lambda[i], -h[i]);
        margin = margin.min(lam.max(slack));
        if lam > tol_act {
            indices.push(i);
        } else if slack > tol_act {
            continue;
        } else {
            ambiguous.push(i);
            if lam >= slack {
                indices.push(i);
            }
        }
    }
    Ok(ActiveSet {
        indices,
        margin,
        degenerate: !ambiguous.is_empty(),
        ambiguous,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct GhostOptions {
    /// Fail with `LicqViolation` instead of flagging.
    pub strict_licq: bool,
    /// Build even when the active set is degenerate.
    pub allow_degenerate: bool,
}

impl Default for GhostOptions {
    fn default() -> Self {
        GhostOptions {
            strict_licq: true,
            allow_degenerate: false,
        }
    }
}

impl GhostOptions {
    /// Never fails on degeneracy or rank; the flags record what happened.
    pub fn lenient() -> Self {
        GhostOptions {
            strict_licq: false,
            allow_degenerate: true,
        }
    }
}

/// Equality-constrained surrogate frozen at `(base_x, base_y)`:
/// objective `g + lambda*^T h + nu*^T e`, constraints
/// `B (y - base_y) + A (x - base_x) = 0` with the rows of `e` first and then
/// the active rows of `h`.
#[derive(Clone)]
pub struct GhostProblem<'a> {
    problem: &'a dyn BilevelProblem,
    pub base_x: Vector,
    pub base_y: Vector,
    pub lambda_star: Vector,
    pub nu_star: Vector,
    pub b_tilde: Matrix,
    pub a_tilde: Matrix,
    pub active: Vec<usize>,
    pub rank_certified: bool,
    pub sigma_min: f64,
}

impl std::fmt::Debug for GhostProblem<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GhostProblem")
            .field("base_x", &self.base_x)
            .field("base_y", &self.base_y)
            .field("active", &self.active)
            .field("rank_certified", &self.rank_certified)
            .finish_non_exhaustive()
    }
}

impl<'a> GhostProblem<'a> {
    pub fn original(&self) -> &'a dyn BilevelProblem {
        self.problem
    }

    pub fn n_rows(&self) -> usize {
        self.b_tilde.nrows()
    }
}

/// Strict construction: fails on degeneracy or a rank-deficient `B`.
pub fn build_ghost<'a>(
    problem: &'a dyn BilevelProblem,
    x: &Vector,
    sol: &PrimalDualSolution,
    active: &ActiveSet,
) -> Result<GhostProblem<'a>> {
    build_ghost_with(problem, x, sol, active, GhostOptions::default())
}

pub fn build_ghost_with<'a>(
    problem: &'a dyn BilevelProblem,
    x: &Vector,
    sol: &PrimalDualSolution,
    active: &ActiveSet,
    opts: GhostOptions,
) -> Result<GhostProblem<'a>> {
    check_dim("x", problem.dim_x(), x.len())?;
    check_dim("y", problem.dim_y(), sol.y.len())?;
    if active.degenerate && !opts.allow_degenerate {
        return Err(Error::DegenerateActiveSet(active.ambiguous.clone()));
    }
    let (d, nx, p) = (problem.dim_y(), problem.dim_x(), problem.n_eq());
    let k = p + active.indices.len();
    let mut b = Matrix::zeros(k, d);
    let mut a = Matrix::zeros(k, nx);
    if p > 0 {
        b.view_mut((0, 0), (p, d)).copy_from(&problem.e_jac_y(x, &sol.y));
        a.view_mut((0, 0), (p, nx)).copy_from(&problem.e_jac_x(x, &sol.y));
    }
    if !active.indices.is_empty() {
        let jy = problem.h_jac_y(x, &sol.y);
        let jx = problem.h_jac_x(x, &sol.y);
        for (r, &i) in active.indices.iter().enumerate() {
            b.row_mut(p + r).copy_from(&jy.row(i));
            a.row_mut(p + r).copy_from(&jx.row(i));
        }
    }
    let (sigma_min, rank_certified) = if k == 0 {
        (f64::INFINITY, true)
    } else if k > d {
        (0.0, false)
    } else {
        let s = min_singular_value(&b);
        (s, s >= 1e-8 * spectral_norm(&b))
    };
    if !rank_certified && opts.strict_licq {
        return Err(Error::LicqViolation { sigma_min });
    }
    Ok(GhostProblem {
        problem,
        base_x: x.clone(),
        base_y: sol.y.clone(),
        lambda_star: sol.lambda.clone(),
        nu_star: sol.nu.clone(),
        b_tilde: b,
        a_tilde: a,
        active: active.indices.clone(),
        rank_certified,
        sigma_min,
    })
}

impl BilevelProblem for GhostProblem<'_> {
    fn dim_y(&self) -> usize {
        self.problem.dim_y()
    }
    fn dim_x(&self) -> usize {
        self.problem.dim_x()
    }
    fn n_ineq(&self) -> usize {
        0
    }
    fn n_eq(&self) -> usize {
        self.b_tilde.nrows()
    }
    fn mu_g(&self) -> f64 {
        // the added lambda*^T h is convex
        self.problem.mu_g()
    }

    fn g_value(&self, x: &Vector, y: &Vector) -> f64 {
        let mut v = self.problem.g_value(x, y);
        if self.problem.n_ineq() > 0 {
            v += self.lambda_star.dot(&self.problem.h_values(x, y));
        }
        if self.problem.n_eq() > 0 {
            v += self.nu_star.dot(&self.problem.e_values(x, y));
        }
        v
    }
    fn g_grad_y(&self, x: &Vector, y: &Vector) -> Vector {
        let mut g = self.problem.g_grad_y(x, y);
        if self.problem.n_ineq() > 0 {
            g += self.problem.h_jac_y(x, y).tr_mul(&self.lambda_star);
        }
        if self.problem.n_eq() > 0 {
            g += self.problem.e_jac_y(x, y).tr_mul(&self.nu_star);
        }
        g
    }
    fn g_grad_x(&self, x: &Vector, y: &Vector) -> Vector {
        let mut g = self.problem.g_grad_x(x, y);
        if self.problem.n_ineq() > 0 {
            g += self.problem.h_jac_x(x, y).tr_mul(&self.lambda_star);
        }
        if self.problem.n_eq() > 0 {
            g += self.problem.e_jac_x(x, y).tr_mul(&self.nu_star);
        }
        g
    }
    fn g_hess_yy(&self, x: &Vector, y: &Vector) -> Matrix {
        self.problem.lagrangian_hess_yy(x, y, &self.lambda_star)
    }
    fn g_hess_yx(&self, x: &Vector, y: &Vector) -> Matrix {
        self.problem
            .lagrangian_hess_yx(x, y, &self.lambda_star, &self.nu_star)
    }

    fn h_values(&self, _x: &Vector, _y: &Vector) -> Vector {
        Vector::zeros(0)
    }
    fn h_jac_y(&self, _x: &Vector, _y: &Vector) -> Matrix {
        Matrix::zeros(0, self.dim_y())
    }
    fn h_jac_x(&self, _x: &Vector, _y: &Vector) -> Matrix {
        Matrix::zeros(0, self.dim_x())
    }

    fn e_values(&self, x: &Vector, y: &Vector) -> Vector {
        &self.b_tilde * (y - &self.base_y) + &self.a_tilde * (x - &self.base_x)
    }
    fn e_jac_y(&self, _x: &Vector, _y: &Vector) -> Matrix {
        self.b_tilde.clone()
    }
    fn e_jac_x(&self, _x: &Vector, _y: &Vector) -> Matrix {
        self.a_tilde.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{make_parametric_qp, preset, random_qp, verify_derivatives, Circle, ParametricQp, Preset};
    use crate::solver::{solve_lower, SolverConfig};

    fn v(xs: &[f64]) -> Vector {
        Vector::from_row_slice(xs)
    }

    fn identity_qp() -> crate::problem::QpProblem {
        make_parametric_qp(ParametricQp::unconstrained(
            Matrix::identity(2, 2),
            Matrix::identity(2, 2),
            Vector::zeros(2),
        ))
        .unwrap()
    }

    #[test]
    fn wall_interior_point_is_active() {
        let wall = preset(&Preset::Wall { a: 100.0 }).unwrap();
        let x = v(&[0.9]);
        let sol = solve_lower(wall.as_ref(), &x, &SolverConfig::oracle()).unwrap();
        let act = identify_active(wall.as_ref(), &x, &sol, DEFAULT_TOL_ACT).unwrap();
        assert_eq!(act.indices, vec![0]);
        assert!(!act.degenerate);
        assert!((act.margin - 10.0).abs() < 1e-8);

        let ghost = build_ghost(wall.as_ref(), &x, &sol, &act).unwrap();
        assert!((ghost.b_tilde[(0, 0)] - 1.0).abs() < 1e-15);
        assert!((ghost.a_tilde[(0, 0)] + 100.0).abs() < 1e-15);
        assert!((ghost.lambda_star[0] - 10.0).abs() < 1e-9);
    }

    #[test]
    fn unconstrained_has_empty_set() {
        let qp = identity_qp();
        let x = v(&[1.0, -2.0]);
        let sol = solve_lower(&qp, &x, &SolverConfig::oracle()).unwrap();
        let act = identify_active(&qp, &x, &sol, DEFAULT_TOL_ACT).unwrap();
        assert!(act.indices.is_empty());
        assert_eq!(act.margin, f64::INFINITY);
        let ghost = build_ghost(&qp, &x, &sol, &act).unwrap();
        assert_eq!(ghost.b_tilde.shape(), (0, 2));
        let y = v(&[0.3, 0.1]);
        assert_eq!(ghost.g_value(&x, &y), qp.g_value(&x, &y));
    }

    #[test]
    fn wall_at_kink_is_degenerate() {
        let wall = preset(&Preset::Wall { a: 100.0 }).unwrap();
        let x = v(&[1.0]);
        let sol = solve_lower(wall.as_ref(), &x, &SolverConfig::oracle()).unwrap();
        let act = identify_active(wall.as_ref(), &x, &sol, DEFAULT_TOL_ACT).unwrap();
        assert!(act.degenerate);
        assert_eq!(act.ambiguous, vec![0]);
        assert!(matches!(
            build_ghost(wall.as_ref(), &x, &sol, &act),
            Err(Error::DegenerateActiveSet(_))
        ));
        assert!(build_ghost_with(wall.as_ref(), &x, &sol, &act, GhostOptions::lenient()).is_ok());
    }

    #[test]
    fn circle_linearization() {
        let x = v(&[0.6]);
        let sol = solve_lower(&Circle, &x, &SolverConfig::oracle()).unwrap();
        let act = identify_active(&Circle, &x, &sol, DEFAULT_TOL_ACT).unwrap();
        let ghost = build_ghost(&Circle, &x, &sol, &act).unwrap();
        assert!((ghost.b_tilde[(0, 0)] - 1.6).abs() < 1e-12);
        assert!((ghost.a_tilde[(0, 0)] - 1.2).abs() < 1e-12);
    }

    #[test]
    fn uncertified_solution_rejected() {
        let wall = preset(&Preset::Wall { a: 100.0 }).unwrap();
        let x = v(&[0.9]);
        let mut sol = solve_lower(wall.as_ref(), &x, &SolverConfig::oracle()).unwrap();
        sol.y[0] += 1e-3;
        assert!(matches!(
            identify_active(wall.as_ref(), &x, &sol, DEFAULT_TOL_ACT),
            Err(Error::UncertifiedSolution { .. })
        ));
    }

    #[test]
    fn dependent_active_rows_violate_licq() {
        // y1 <= 0 twice
        let qp = make_parametric_qp(
            ParametricQp::unconstrained(Matrix::identity(2, 2), Matrix::identity(2, 2), Vector::zeros(2))
                .with_inequalities(
                    Matrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 0.0]),
                    Vector::zeros(2),
                    Matrix::zeros(2, 2),
                ),
        )
        .unwrap();
        let x = v(&[-1.0, 0.0]);
        let sol = solve_lower(&qp, &x, &SolverConfig::oracle()).unwrap();
        let act = ActiveSet {
            indices: vec![0, 1],
            margin: 0.5,
            degenerate: false,
            ambiguous: vec![],
        };
        assert!(matches!(
            build_ghost(&qp, &x, &sol, &act),
            Err(Error::LicqViolation { .. })
        ));
        let lenient = build_ghost_with(&qp, &x, &sol, &act, GhostOptions::lenient()).unwrap();
        assert!(!lenient.rank_certified);
    }

    #[test]
    fn base_point_solves_ghost() {
        for seed in 0..20 {
            let qp = random_qp(seed, 8, 6, 2).unwrap();
            let x = Vector::from_element(8, 0.01);
            let sol = solve_lower(&qp, &x, &SolverConfig::oracle()).unwrap();
            let act = identify_active(&qp, &x, &sol, DEFAULT_TOL_ACT).unwrap();
            let ghost = build_ghost(&qp, &x, &sol, &act).unwrap();
            assert!(ghost.g_grad_y(&x, &sol.y).norm() <= 1e-9);
            let gsol = solve_lower(&ghost, &x, &SolverConfig::oracle()).unwrap();
            assert!((gsol.y - &sol.y).amax() <= 1e-8, "seed {seed}");
            assert!(gsol.nu.amax() <= 1e-8);
            assert!(verify_derivatives(&ghost, seed, 5).max_rel_err < 1e-5);
        }
    }

    #[test]
    fn enlarging_band_keeps_confident_indices() {
        for seed in 0..20 {
            let qp = random_qp(seed, 6, 6, 0).unwrap();
            let x = Vector::zeros(6);
            let sol = solve_lower(&qp, &x, &SolverConfig::oracle()).unwrap();
            let small = identify_active(&qp, &x, &sol, 1e-6).unwrap();
            let large = identify_active(&qp, &x, &sol, 1e-3).unwrap();
            for &i in &small.indices {
                if sol.lambda[i] > 1e-6 {
                    assert!(large.indices.contains(&i));
                }
            }
        }
    }

    #[test]
    fn infinite_margin_serializes_as_null() {
        let act = ActiveSet {
            indices: vec![],
            margin: f64::INFINITY,
            degenerate: false,
            ambiguous: vec![],
        };
        let json = serde_json::to_value(&act).unwrap();
        assert!(json["margin"].is_null());
    }
}
