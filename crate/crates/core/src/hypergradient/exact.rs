use crate::active_set::{identify_active, tol_act_for, ActiveSet};
use crate::error::{check_dim, Error, Result};
use crate::problem::BilevelProblem;
use crate::solver::{solve_lower, PrimalDualSolution, SolverConfig};
use crate::{Matrix, Vector};

/// Diagonal pivot ratio below which the KKT Jacobian counts as singular.
const KKT_PIVOT_REL: f64 = 1e-13;

/// Jacobians of the KKT map `G(y, lambda, nu, x)`: `(dG/d(y, lambda, nu), dG/dx)`.
fn kkt_jacobians(problem: &dyn BilevelProblem, x: &Vector, sol: &PrimalDualSolution) -> (Matrix, Matrix) {
    let (d, m, p, nx) = (problem.dim_y(), problem.n_ineq(), problem.n_eq(), problem.dim_x());
    let n = d + m + p;
    let y = &sol.y;
    let mut k = Matrix::zeros(n, n);
    let mut gx = Matrix::zeros(n, nx);
    k.view_mut((0, 0), (d, d))
        .copy_from(&problem.lagrangian_hess_yy(x, y, &sol.lambda));
    gx.view_mut((0, 0), (d, nx))
        .copy_from(&problem.lagrangian_hess_yx(x, y, &sol.lambda, &sol.nu));
    if m > 0 {
        let (jy, jx, h) = (problem.h_jac_y(x, y), problem.h_jac_x(x, y), problem.h_values(x, y));
        k.view_mut((0, d), (d, m)).copy_from(&jy.transpose());
        for i in 0..m {
            let l = sol.lambda[i];
            k.view_mut((d + i, 0), (1, d)).copy_from(&(jy.row(i) * l));
            k[(d + i, d + i)] = h[i];
            gx.view_mut((d + i, 0), (1, nx)).copy_from(&(jx.row(i) * l));
        }
    }
    if p > 0 {
        let (jy, jx) = (problem.e_jac_y(x, y), problem.e_jac_x(x, y));
        k.view_mut((0, d + m), (d, p)).copy_from(&jy.transpose());
        k.view_mut((d + m, 0), (p, d)).copy_from(&jy);
        gx.view_mut((d + m, 0), (p, nx)).copy_from(&jx);
    }
    (k, gx)
}

fn factor_checked(k: Matrix) -> Result<nalgebra::linalg::FullPivLU<f64, nalgebra::Dyn, nalgebra::Dyn>> {
    let lu = k.full_piv_lu();
    let u = lu.u();
    let diag = u.diagonal().map(f64::abs);
    let (lo, hi) = (diag.min(), diag.max());
    if diag.is_empty() {
        return Ok(lu);
    }
    if !(lo > KKT_PIVOT_REL * hi) {
        return Err(Error::SingularKkt(format!(
            "pivot ratio {:.3e} below {KKT_PIVOT_REL:.0e}",
            lo / hi
        )));
    }
    Ok(lu)
}

fn check_inputs(problem: &dyn BilevelProblem, x: &Vector, sol: &PrimalDualSolution, active: &ActiveSet) -> Result<()> {
    check_dim("x", problem.dim_x(), x.len())?;
    check_dim("y", problem.dim_y(), sol.y.len())?;
    check_dim("lambda", problem.n_ineq(), sol.lambda.len())?;
    check_dim("nu", problem.n_eq(), sol.nu.len())?;
    if active.degenerate {
        return Err(Error::SingularKkt(format!(
            "strict complementarity fails at {:?}",
            active.ambiguous
        )));
    }
    Ok(())
}

/// `dy*/dx` by implicit differentiation of the full KKT system.
pub fn exact_jacobian(
    problem: &dyn BilevelProblem,
    x: &Vector,
    sol: &PrimalDualSolution,
    active: &ActiveSet,
) -> Result<Matrix> {
    check_inputs(problem, x, sol, active)?;
    let (k, gx) = kkt_jacobians(problem, x, sol);
    let lu = factor_checked(k)?;
    let full = lu
        .solve(&(-gx))
        .ok_or_else(|| Error::SingularKkt("LU solve failed".into()))?;
    Ok(full.rows(0, problem.dim_y()).into_owned())
}

/// `direct + (dy*/dx)^T c`, solving the lower level at `x` first.
pub fn exact_hypergradient(problem: &dyn BilevelProblem, x: &Vector, c: &Vector, direct: &Vector) -> Result<Vector> {
    let cfg = SolverConfig::oracle();
    let sol = solve_lower(problem, x, &cfg)?;
    let active = identify_active(problem, x, &sol, tol_act_for(cfg.tol))?;
    exact_hypergradient_at(problem, x, &sol, &active, c, direct)
}

/// Adjoint form of the exact hypergradient at a known solution: one solve
/// with the transposed KKT Jacobian instead of `dim_x` forward solves.
pub fn exact_hypergradient_at(
    problem: &dyn BilevelProblem,
    x: &Vector,
    sol: &PrimalDualSolution,
    active: &ActiveSet,
    c: &Vector,
    direct: &Vector,
) -> Result<Vector> {
    check_inputs(problem, x, sol, active)?;
    check_dim("c", problem.dim_y(), c.len())?;
    check_dim("direct", problem.dim_x(), direct.len())?;
    let (k, gx) = kkt_jacobians(problem, x, sol);
    let lu = factor_checked(k.transpose())?;
    let mut rhs = Vector::zeros(k.nrows());
    rhs.rows_mut(0, problem.dim_y()).copy_from(c);
    let w = lu
        .solve(&rhs)
        .ok_or_else(|| Error::SingularKkt("LU solve failed".into()))?;
    Ok(direct - gx.tr_mul(&w))
}
