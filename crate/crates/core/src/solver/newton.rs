use crate::error::{Error, Result};
use crate::linalg::{independent_rows, saddle_matrix, SymmetricIndefinite};
use crate::problem::BilevelProblem;
use crate::{Matrix, Vector};

/// Relative tolerance for discarding dependent constraint rows.
pub(crate) const ROW_REL_TOL: f64 = 1e-9;

pub(crate) struct NewtonOutcome {
    pub y: Vector,
    pub lambda: Vector,
    pub nu: Vector,
    pub iterations: usize,
}

/// Newton's method on the KKT system where the equalities and the
/// inequalities listed in `active` are imposed as equalities.
///
/// Rows that are linearly dependent at `y0` are dropped with zero multiplier,
/// equality rows taking precedence. `extra_lin` is added to `grad_y g`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn newton_fixed_active(
    problem: &dyn BilevelProblem,
    x: &Vector,
    y0: &Vector,
    lambda0: &Vector,
    nu0: &Vector,
    active: &[usize],
    extra_lin: Option<&Vector>,
    tol: f64,
    max_iter: usize,
) -> Result<NewtonOutcome> {
    let (d, m, p) = (problem.dim_y(), problem.n_ineq(), problem.n_eq());
    // (is_equality, index) for every candidate row
    let mut rows: Vec<(bool, usize)> = (0..p).map(|j| (true, j)).collect();
    rows.extend(active.iter().map(|&i| (false, i)));
    let jac0 = stack_jacobian(problem, x, y0, &rows);
    let kept: Vec<(bool, usize)> = independent_rows(&jac0, ROW_REL_TOL)
        .into_iter()
        .map(|r| rows[r])
        .collect();
    let k = kept.len();

    let mut y = y0.clone();
    let mut mu = Vector::from_fn(k, |r, _| match kept[r] {
        (true, j) => nu0.get(j).copied().unwrap_or(0.0),
        (false, i) => lambda0.get(i).copied().unwrap_or(0.0),
    });
    let residual = |y: &Vector, mu: &Vector| -> (Vector, Vector) {
        let jac = stack_jacobian(problem, x, y, &kept);
        let mut ry = problem.g_grad_y(x, y) + jac.tr_mul(mu);
        if let Some(c) = extra_lin {
            ry += c;
        }
        (ry, stack_values(problem, x, y, &kept))
    };
    let merit = |r: &(Vector, Vector)| r.0.norm() + r.1.lp_norm(1);

    let mut iterations = 0;
    let mut cur = residual(&y, &mu);
    while iterations < max_iter {
        if cur.0.norm().max(cur.1.amax()) <= tol {
            break;
        }
        let lam_full = scatter_lambda(m, &kept, &mu);
        let hess = problem.lagrangian_hess_yy(x, &y, &lam_full);
        let jac = stack_jacobian(problem, x, &y, &kept);
        let kkt = saddle_matrix(&hess, &jac);
        let fact = SymmetricIndefinite::factor(&kkt)?;
        if fact.inertia() != (d, k) {
            return Err(Error::NotStronglyConvex);
        }
        let mut grad = problem.g_grad_y(x, &y);
        if let Some(c) = extra_lin {
            grad += c;
        }
        let mut rhs = Vector::zeros(d + k);
        rhs.rows_mut(0, d).copy_from(&(-grad));
        rhs.rows_mut(d, k).copy_from(&(-&cur.1));
        let sol = fact.solve(&rhs);
        let dy = sol.rows(0, d).into_owned();
        let dmu = sol.rows(d, k) - &mu;
        iterations += 1;

        let m0 = merit(&cur);
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..30 {
            let yt = &y + alpha * &dy;
            let mt = &mu + alpha * &dmu;
            let rt = residual(&yt, &mt);
            if merit(&rt) < (1.0 - 1e-4 * alpha) * m0 {
                accepted = Some((yt, mt, rt));
                break;
            }
            alpha *= 0.5;
        }
        match accepted {
            Some((yt, mt, rt)) => {
                y = yt;
                mu = mt;
                cur = rt;
            }
            // no descent left: rounding floor reached
            None => break,
        }
    }
    let lambda = scatter_lambda(m, &kept, &mu);
    let mut nu = Vector::zeros(p);
    for (r, &(eq, j)) in kept.iter().enumerate() {
        if eq {
            nu[j] = mu[r];
        }
    }
    Ok(NewtonOutcome {
        y,
        lambda,
        nu,
        iterations,
    })
}

fn scatter_lambda(m: usize, kept: &[(bool, usize)], mu: &Vector) -> Vector {
    let mut lambda = Vector::zeros(m);
    for (r, &(eq, i)) in kept.iter().enumerate() {
        if !eq {
            lambda[i] = mu[r];
        }
    }
    lambda
}

fn stack_jacobian(problem: &dyn BilevelProblem, x: &Vector, y: &Vector, rows: &[(bool, usize)]) -> Matrix {
    let d = problem.dim_y();
    let je = if problem.n_eq() > 0 && rows.iter().any(|r| r.0) {
        problem.e_jac_y(x, y)
    } else {
        Matrix::zeros(0, d)
    };
    let jh = if problem.n_ineq() > 0 && rows.iter().any(|r| !r.0) {
        problem.h_jac_y(x, y)
    } else {
        Matrix::zeros(0, d)
    };
    Matrix::from_fn(rows.len(), d, |r, c| match rows[r] {
        (true, j) => je[(j, c)],
        (false, i) => jh[(i, c)],
    })
}

fn stack_values(problem: &dyn BilevelProblem, x: &Vector, y: &Vector, rows: &[(bool, usize)]) -> Vector {
    let e = if problem.n_eq() > 0 && rows.iter().any(|r| r.0) {
        problem.e_values(x, y)
    } else {
        Vector::zeros(0)
    };
    let h = if problem.n_ineq() > 0 && rows.iter().any(|r| !r.0) {
        problem.h_values(x, y)
    } else {
        Vector::zeros(0)
    };
    Vector::from_fn(rows.len(), |r, _| match rows[r] {
        (true, j) => e[j],
        (false, i) => h[i],
    })
}
