//! Lower-level solvers with certified KKT residuals.
//!
//! [`solve_lower`] returns a primal-dual point whose three KKT residual blocks
//! (stationarity, complementary slackness, feasibility) are all below the
//! configured tolerance. Problems with a closed form use it; everything else
//! goes through a Mehrotra predictor-corrector interior-point loop on the
//! callbacks, followed by a Newton polish on the detected active set.

mod eqp;
mod ipm;
mod newton;

use std::time::Instant;

use serde::Serialize;

pub use eqp::solve_eqp;
pub(crate) use newton::newton_fixed_active;

use crate::error::{check_dim, Error, Result};
use crate::linalg::inf_norm;
use crate::problem::serde_matrix::vector;
use crate::problem::BilevelProblem;
use crate::Vector;

/// Primal point, multipliers and the residuals certifying them.
#[derive(Debug, Clone, Serialize)]
pub struct PrimalDualSolution {
    #[serde(with = "vector")]
    pub y: Vector,
    #[serde(with = "vector")]
    pub lambda: Vector,
    #[serde(with = "vector")]
    pub nu: Vector,
    /// `|grad_y g + h_jac_y^T lambda + e_jac_y^T nu|_2`
    pub stationarity_residual: f64,
    /// `|lambda o h|_inf`
    pub comp_slack_residual: f64,
    /// `max(|e|_inf, max_i max(h_i, 0))`
    pub feas_residual: f64,
    pub iterations: usize,
    /// Seconds.
    pub wall_time: f64,
}

impl PrimalDualSolution {
    pub fn max_residual(&self) -> f64 {
        self.stationarity_residual
            .max(self.comp_slack_residual)
            .max(self.feas_residual)
    }

    /// All residuals at most `tol` and multipliers nonnegative.
    pub fn is_certified(&self, tol: f64) -> bool {
        self.max_residual() <= tol && self.lambda.iter().all(|&l| l >= -1e-12)
    }
}

#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub tol: f64,
    pub max_iter: usize,
    pub warm_start: Option<PrimalDualSolution>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig::oracle()
    }
}

impl SolverConfig {
    /// Tight tolerance used by the oracle comparisons.
    pub fn oracle() -> Self {
        SolverConfig {
            tol: 1e-10,
            max_iter: 200,
            warm_start: None,
        }
    }

    /// Looser tolerance for training loops.
    pub fn training() -> Self {
        SolverConfig {
            tol: 1e-8,
            ..SolverConfig::oracle()
        }
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn with_warm_start(mut self, sol: PrimalDualSolution) -> Self {
        self.warm_start = Some(sol);
        self
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) || self.max_iter == 0 {
            return Err(Error::InvalidArgument(format!(
                "solver config needs tol > 0 and max_iter >= 1 (tol = {}, max_iter = {})",
                self.tol, self.max_iter
            )));
        }
        Ok(())
    }
}

/// Recomputes the three KKT blocks at `(sol.y, sol.lambda, sol.nu)`.
pub fn kkt_residual(
    problem: &dyn BilevelProblem,
    x: &Vector,
    sol: &PrimalDualSolution,
) -> Result<(f64, f64, f64)> {
    residuals(problem, x, &sol.y, &sol.lambda, &sol.nu)
}

pub(crate) fn residuals(
    problem: &dyn BilevelProblem,
    x: &Vector,
    y: &Vector,
    lambda: &Vector,
    nu: &Vector,
) -> Result<(f64, f64, f64)> {
    check_dim("x", problem.dim_x(), x.len())?;
    check_dim("y", problem.dim_y(), y.len())?;
    check_dim("lambda", problem.n_ineq(), lambda.len())?;
    check_dim("nu", problem.n_eq(), nu.len())?;
    let mut grad = problem.g_grad_y(x, y);
    let (mut comp, mut feas) = (0.0f64, 0.0f64);
    if problem.n_ineq() > 0 {
        let h = problem.h_values(x, y);
        grad += problem.h_jac_y(x, y).tr_mul(lambda);
        comp = inf_norm(&h.component_mul(lambda));
        feas = h.iter().fold(0.0, |acc, &v| acc.max(v));
    }
    if problem.n_eq() > 0 {
        grad += problem.e_jac_y(x, y).tr_mul(nu);
        feas = feas.max(inf_norm(&problem.e_values(x, y)));
    }
    Ok((grad.norm(), comp, feas))
}

pub(crate) fn assemble(
    problem: &dyn BilevelProblem,
    x: &Vector,
    y: Vector,
    lambda: Vector,
    nu: Vector,
    iterations: usize,
    started: Instant,
) -> Result<PrimalDualSolution> {
    let (stat, comp, feas) = residuals(problem, x, &y, &lambda, &nu)?;
    Ok(PrimalDualSolution {
        y,
        lambda,
        nu,
        stationarity_residual: stat,
        comp_slack_residual: comp,
        feas_residual: feas,
        iterations,
        wall_time: started.elapsed().as_secs_f64(),
    })
}

/// Solves the lower-level problem at `x` to the residual tolerance in `cfg`.
///
/// A warm start is tried first by polishing on its active set; if that does
/// not certify, the interior-point method runs from scratch.
pub fn solve_lower(
    problem: &dyn BilevelProblem,
    x: &Vector,
    cfg: &SolverConfig,
) -> Result<PrimalDualSolution> {
    cfg.validate()?;
    check_dim("x", problem.dim_x(), x.len())?;
    if !(problem.mu_g() > 0.0) {
        return Err(Error::NotStronglyConvex);
    }
    let started = Instant::now();

    if let Some(closed) = problem.closed_form(x) {
        let c = closed?;
        let sol = assemble(problem, x, c.y, c.lambda, c.nu, 0, started)?;
        return certify(sol, cfg);
    }

    let mut spent = 0;
    if let Some(warm) = &cfg.warm_start {
        if warm.y.len() == problem.dim_y() && warm.lambda.len() == problem.n_ineq() {
            let h = problem.h_values(x, &warm.y);
            let active: Vec<usize> = (0..problem.n_ineq())
                .filter(|&i| warm.lambda[i] > 0.0 && warm.lambda[i] > -h[i])
                .collect();
            if let Ok(pol) = polish(problem, x, &warm.y, &warm.lambda, &warm.nu, &active, cfg.tol) {
                spent += pol.iterations;
                if pol.is_certified(cfg.tol) {
                    return Ok(PrimalDualSolution {
                        iterations: spent,
                        wall_time: started.elapsed().as_secs_f64(),
                        ..pol
                    });
                }
            }
        }
    }

    let ip = ipm::interior_point(problem, x, cfg)?;
    spent += ip.iterations;
    let raw = assemble(
        problem,
        x,
        ip.y.clone(),
        ip.lambda.clone(),
        ip.nu.clone(),
        spent,
        started,
    )?;
    let active: Vec<usize> = (0..problem.n_ineq())
        .filter(|&i| ip.lambda[i] > ip.slack[i])
        .collect();
    let mut best = raw;
    match polish(problem, x, &ip.y, &ip.lambda, &ip.nu, &active, cfg.tol) {
        Ok(pol) => {
            spent += pol.iterations;
            let better = pol.lambda.iter().all(|&l| l >= -1e-12)
                && pol.max_residual() <= best.max_residual().max(cfg.tol);
            if better {
                best = pol;
            }
        }
        Err(e) => log::debug!("active-set polish failed: {e}"),
    }
    best.iterations = spent;
    best.wall_time = started.elapsed().as_secs_f64();
    certify(best, cfg)
}

fn certify(sol: PrimalDualSolution, cfg: &SolverConfig) -> Result<PrimalDualSolution> {
    if sol.is_certified(cfg.tol) {
        Ok(sol)
    } else {
        Err(Error::MaxIterExceeded {
            max_iter: cfg.max_iter,
            residual: sol.max_residual(),
            best: Box::new(sol),
        })
    }
}

/// Newton refinement with the inequalities in `active` held as equalities
/// and all others dropped; inactive multipliers are zero in the result.
///
/// The guess is corrected a few times: constraints with clearly negative
/// multipliers leave the set and violated ones join it.
fn polish(
    problem: &dyn BilevelProblem,
    x: &Vector,
    y: &Vector,
    lambda: &Vector,
    nu: &Vector,
    active: &[usize],
    tol: f64,
) -> Result<PrimalDualSolution> {
    let started = Instant::now();
    let mut active = active.to_vec();
    let (mut y0, mut lam0, mut nu0) = (y.clone(), lambda.clone(), nu.clone());
    let mut spent = 0;
    for round in 0..POLISH_ROUNDS {
        let out = newton_fixed_active(problem, x, &y0, &lam0, &nu0, &active, None, 0.1 * tol, 30)?;
        spent += out.iterations;
        let h = if problem.n_ineq() > 0 {
            problem.h_values(x, &out.y)
        } else {
            Vector::zeros(0)
        };
        let mut next: Vec<usize> = active.iter().copied().filter(|&i| out.lambda[i] >= -tol).collect();
        let dropped = next.len() < active.len();
        let mut added = false;
        for i in 0..problem.n_ineq() {
            if h[i] > tol && !active.contains(&i) {
                next.push(i);
                added = true;
            }
        }
        if (!dropped && !added) || round + 1 == POLISH_ROUNDS {
            let mut lam = out.lambda;
            for v in lam.iter_mut() {
                if *v < 0.0 && *v >= -tol {
                    *v = 0.0;
                }
            }
            return assemble(problem, x, out.y, lam, out.nu, spent, started);
        }
        next.sort_unstable();
        active = next;
        y0 = out.y;
        lam0 = out.lambda.map(|v| v.max(0.0));
        nu0 = out.nu;
    }
    unreachable!("the last round always returns")
}

const POLISH_ROUNDS: usize = 5;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{make_parametric_qp, preset, random_qp, Circle, ParametricQp, Preset};
    use crate::{Matrix, Vector};

    fn v(xs: &[f64]) -> Vector {
        Vector::from_row_slice(xs)
    }

    #[test]
    fn wall_optimum() {
        let wall = preset(&Preset::Wall { a: 100.0 }).unwrap();
        let sol = solve_lower(wall.as_ref(), &v(&[0.9]), &SolverConfig::oracle()).unwrap();
        assert!((sol.y[0] - 90.0).abs() < 1e-9, "{sol:?}");
        assert!((sol.lambda[0] - 10.0).abs() < 1e-9);
        assert!(sol.max_residual() <= 1e-10);
    }

    #[test]
    fn unconstrained_identity_qp() {
        let qp = make_parametric_qp(ParametricQp::unconstrained(
            Matrix::identity(2, 2),
            Matrix::identity(2, 2),
            Vector::zeros(2),
        ))
        .unwrap();
        let sol = solve_lower(&qp, &v(&[1.0, -2.0]), &SolverConfig::oracle()).unwrap();
        assert!((sol.y - v(&[-1.0, 2.0])).amax() < 1e-12);
    }

    #[test]
    fn circle_optimum_matches_hand_kkt() {
        let sol = solve_lower(&Circle, &v(&[0.6]), &SolverConfig::oracle()).unwrap();
        assert!((sol.y[0] - 0.8).abs() < 1e-12);
        assert!((sol.lambda[0] - 1.5).abs() < 1e-12);
    }

    /// Circle without its closed form, to exercise the interior-point path
    /// on a nonlinear constraint.
    struct OpaqueCircle;
    impl BilevelProblem for OpaqueCircle {
        fn dim_y(&self) -> usize { 1 }
        fn dim_x(&self) -> usize { 1 }
        fn n_ineq(&self) -> usize { 1 }
        fn n_eq(&self) -> usize { 0 }
        fn mu_g(&self) -> f64 { 2.0 }
        fn g_value(&self, x: &Vector, y: &Vector) -> f64 { Circle.g_value(x, y) }
        fn g_grad_y(&self, x: &Vector, y: &Vector) -> Vector { Circle.g_grad_y(x, y) }
        fn g_grad_x(&self, x: &Vector, y: &Vector) -> Vector { Circle.g_grad_x(x, y) }
        fn g_hess_yy(&self, x: &Vector, y: &Vector) -> Matrix { Circle.g_hess_yy(x, y) }
        fn g_hess_yx(&self, x: &Vector, y: &Vector) -> Matrix { Circle.g_hess_yx(x, y) }
        fn h_values(&self, x: &Vector, y: &Vector) -> Vector { Circle.h_values(x, y) }
        fn h_jac_y(&self, x: &Vector, y: &Vector) -> Matrix { Circle.h_jac_y(x, y) }
        fn h_jac_x(&self, x: &Vector, y: &Vector) -> Matrix { Circle.h_jac_x(x, y) }
        fn e_values(&self, x: &Vector, y: &Vector) -> Vector { Circle.e_values(x, y) }
        fn e_jac_y(&self, x: &Vector, y: &Vector) -> Matrix { Circle.e_jac_y(x, y) }
        fn e_jac_x(&self, x: &Vector, y: &Vector) -> Matrix { Circle.e_jac_x(x, y) }
        fn h_hess_yy_weighted(&self, x: &Vector, y: &Vector, w: &Vector) -> Matrix {
            Circle.h_hess_yy_weighted(x, y, w)
        }
    }

    #[test]
    fn interior_point_handles_nonlinear_constraint() {
        for x in [0.0, 0.2, 0.6, -0.9] {
            let sol = solve_lower(&OpaqueCircle, &v(&[x]), &SolverConfig::oracle()).unwrap();
            let y = (1.0f64 - x * x).sqrt();
            assert!((sol.y[0] - y).abs() < 1e-9, "x={x}: {sol:?}");
            assert!((sol.lambda[0] - (2.0 - y) / y).abs() < 1e-8);
        }
    }

    #[test]
    fn residual_blocks() {
        let wall = preset(&Preset::Wall { a: 100.0 }).unwrap();
        let x = v(&[0.9]);
        let exact = PrimalDualSolution {
            y: v(&[90.0]),
            lambda: v(&[10.0]),
            nu: Vector::zeros(0),
            stationarity_residual: 0.0,
            comp_slack_residual: 0.0,
            feas_residual: 0.0,
            iterations: 0,
            wall_time: 0.0,
        };
        let (s, c, f) = kkt_residual(wall.as_ref(), &x, &exact).unwrap();
        assert!(s <= 1e-12 && c <= 1e-12 && f <= 1e-12);

        let zero_dual = PrimalDualSolution {
            lambda: v(&[0.0]),
            ..exact.clone()
        };
        let (s, c, _) = kkt_residual(wall.as_ref(), &x, &zero_dual).unwrap();
        assert_eq!(c, 0.0);
        assert!(s > 1.0);

        let qp = make_parametric_qp(ParametricQp::unconstrained(
            Matrix::identity(2, 2),
            Matrix::identity(2, 2),
            Vector::zeros(2),
        ))
        .unwrap();
        let off = PrimalDualSolution {
            y: v(&[-1.0 + 1e-3, 2.0]),
            lambda: Vector::zeros(0),
            nu: Vector::zeros(0),
            ..exact
        };
        let (s, _, _) = kkt_residual(&qp, &v(&[1.0, -2.0]), &off).unwrap();
        assert!((s - 1e-3).abs() < 1e-12);

        let bad = PrimalDualSolution {
            y: v(&[1.0, 2.0, 3.0]),
            ..off
        };
        assert!(matches!(
            kkt_residual(&qp, &v(&[1.0, -2.0]), &bad),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn infeasible_problem_errors() {
        // y <= -1 and -y <= -1 (y >= 1)
        let qp = make_parametric_qp(
            ParametricQp::unconstrained(Matrix::identity(1, 1), Matrix::identity(1, 1), Vector::zeros(1))
                .with_inequalities(
                    Matrix::from_row_slice(2, 1, &[1.0, -1.0]),
                    v(&[-1.0, -1.0]),
                    Matrix::zeros(2, 1),
                ),
        )
        .unwrap();
        let err = solve_lower(&qp, &v(&[0.0]), &SolverConfig::oracle()).unwrap_err();
        assert!(
            matches!(err, Error::Infeasible(_) | Error::MaxIterExceeded { .. }),
            "{err:?}"
        );
    }

    #[test]
    fn random_qps_certify_and_warm_start_is_not_slower() {
        for seed in 0..50 {
            let qp = random_qp(seed, 8, 6, 2).unwrap();
            let x = Vector::zeros(8);
            let cold = solve_lower(&qp, &x, &SolverConfig::oracle()).unwrap();
            assert!(cold.is_certified(1e-10));
            let xd = Vector::from_element(8, 1e-3);
            let cold_d = solve_lower(&qp, &xd, &SolverConfig::oracle()).unwrap();
            let warm_d =
                solve_lower(&qp, &xd, &SolverConfig::oracle().with_warm_start(cold.clone())).unwrap();
            assert!(warm_d.iterations <= cold_d.iterations, "seed {seed}");
            assert!((warm_d.y - cold_d.y).amax() < 1e-9);
        }
    }

    #[test]
    fn equality_only_agrees_with_eqp() {
        for seed in 0..10 {
            let qp = random_qp(seed, 6, 0, 3).unwrap();
            let x = Vector::from_element(6, 0.3);
            let sol = solve_lower(&qp, &x, &SolverConfig::oracle()).unwrap();
            let data = qp.data();
            let (y, mult) = solve_eqp(
                &data.q,
                &qp.linear_term(&x),
                &data.a_eq,
                &(&data.b0 + &data.b_x * &x),
            )
            .unwrap();
            assert!((sol.y - y).amax() < 1e-9);
            assert!((sol.nu - mult).amax() < 1e-9);
        }
    }
}
