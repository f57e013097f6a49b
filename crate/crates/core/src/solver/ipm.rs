//! Mehrotra predictor-corrector on the slack form
//! `grad g + Jh^T lam + Je^T nu = 0, h + s = 0, e = 0, s o lam = 0`.

use super::newton::ROW_REL_TOL;
use super::SolverConfig;
use crate::error::{Error, Result};
use crate::linalg::{independent_rows, pinv_solve, saddle_matrix, SymmetricIndefinite};
use crate::problem::BilevelProblem;
use crate::{Matrix, Vector};

const STEP_TO_BOUNDARY: f64 = 0.995;
/// Barrier scaling spreads the diagonal over many orders of magnitude, so
/// only a numerically zero pivot stops the iteration.
const IPM_PIVOT_REL: f64 = 1e-20;

pub(crate) struct IpmOutcome {
    pub y: Vector,
    pub slack: Vector,
    pub lambda: Vector,
    pub nu: Vector,
    pub iterations: usize,
}

struct Point {
    y: Vector,
    s: Vector,
    lam: Vector,
    nu: Vector,
}

struct Residual {
    dual: Vector,
    ineq: Vector,
    eq: Vector,
    gap: f64,
}

impl Residual {
    fn primal(&self) -> f64 {
        self.ineq.amax().max(self.eq.amax())
    }
    fn merit(&self) -> f64 {
        self.dual.norm() + self.ineq.norm() + self.eq.norm() + self.gap
    }
}

fn max_step(v: &Vector, dv: &Vector) -> f64 {
    v.iter()
        .zip(dv.iter())
        .filter(|(_, &d)| d < 0.0)
        .fold(1.0f64, |a, (&vi, &d)| a.min(-vi / d))
}

fn select_rows(m: &Matrix, rows: &[usize]) -> Matrix {
    Matrix::from_fn(rows.len(), m.ncols(), |r, c| m[(rows[r], c)])
}

pub(crate) fn interior_point(problem: &dyn BilevelProblem, x: &Vector, cfg: &SolverConfig) -> Result<IpmOutcome> {
    let (d, m, p) = (problem.dim_y(), problem.n_ineq(), problem.n_eq());
    // well below the caller tolerance so the active-set guess handed to the
    // polish is reliable; rounding stops the loop earlier when it must
    let tol = (1e-3 * cfg.tol).max(1e-14);

    // equalities are affine in y, so row dependence is decided once
    let (eq_rows, y0) = if p > 0 {
        let je = problem.e_jac_y(x, &Vector::zeros(d));
        let rows = independent_rows(&je, ROW_REL_TOL);
        let e0 = problem.e_values(x, &Vector::zeros(d));
        (rows, -pinv_solve(&je, &e0))
    } else {
        (Vec::new(), Vector::zeros(d))
    };
    let k = eq_rows.len();

    let residual = |pt: &Point| -> Residual {
        let mut dual = problem.g_grad_y(x, &pt.y);
        let mut ineq = Vector::zeros(0);
        let mut eq = Vector::zeros(0);
        if m > 0 {
            dual += problem.h_jac_y(x, &pt.y).tr_mul(&pt.lam);
            ineq = problem.h_values(x, &pt.y) + &pt.s;
        }
        if k > 0 {
            let je = select_rows(&problem.e_jac_y(x, &pt.y), &eq_rows);
            dual += je.tr_mul(&pt.nu);
            let e = problem.e_values(x, &pt.y);
            eq = Vector::from_fn(k, |r, _| e[eq_rows[r]]);
        }
        let gap = if m > 0 { pt.s.dot(&pt.lam) / m as f64 } else { 0.0 };
        Residual { dual, ineq, eq, gap }
    };

    let mut pt = Point {
        s: if m > 0 {
            problem.h_values(x, &y0).map(|h| (-h).max(1.0))
        } else {
            Vector::zeros(0)
        },
        lam: Vector::from_element(m, 1.0),
        nu: Vector::zeros(k),
        y: y0,
    };
    let mut res = residual(&pt);
    let mut iterations = 0;

    loop {
        if res.dual.norm() <= tol && res.primal() <= tol && res.gap <= tol {
            break;
        }
        if iterations >= cfg.max_iter {
            break;
        }
        if iterations >= 30 && res.primal() > 1e3 * tol && pt.lam.amax() > 1e10 {
            return Err(Error::Infeasible(format!(
                "primal residual {:.3e} with multipliers of size {:.3e}",
                res.primal(),
                pt.lam.amax()
            )));
        }
        iterations += 1;

        let hess = problem.lagrangian_hess_yy(x, &pt.y, &pt.lam);
        let jh = if m > 0 { problem.h_jac_y(x, &pt.y) } else { Matrix::zeros(0, d) };
        let je = if k > 0 {
            select_rows(&problem.e_jac_y(x, &pt.y), &eq_rows)
        } else {
            Matrix::zeros(0, d)
        };
        let w = pt.lam.component_div(&pt.s);
        let mut reduced = hess;
        if m > 0 {
            let scaled = Matrix::from_fn(m, d, |i, j| w[i] * jh[(i, j)]);
            reduced += jh.tr_mul(&scaled);
        }
        let kkt = saddle_matrix(&reduced, &je);
        // late in the run barrier scaling makes the system numerically
        // singular or spoils its inertia; the point is then close enough for
        // the active-set polish
        let converging = iterations > 1 && res.gap < 1e-6;
        let fact = match SymmetricIndefinite::factor_with_tol(&kkt, IPM_PIVOT_REL) {
            Ok(f) => f,
            Err(Error::RankDeficient { .. }) if converging => break,
            Err(e) => return Err(e),
        };
        if fact.inertia() != (d, k) {
            if converging {
                break;
            }
            return Err(Error::NotStronglyConvex);
        }

        // rc is the target for s o lam; returns (dy, dnu, ds, dlam)
        let direction = |rc: &Vector| -> (Vector, Vector, Vector, Vector) {
            let mut rhs = Vector::zeros(d + k);
            let mut top = -&res.dual;
            if m > 0 {
                let t = w.component_mul(&res.ineq) - rc.component_div(&pt.s);
                top -= jh.tr_mul(&t);
            }
            rhs.rows_mut(0, d).copy_from(&top);
            rhs.rows_mut(d, k).copy_from(&(-&res.eq));
            let sol = fact.solve(&rhs);
            let dy = sol.rows(0, d).into_owned();
            let dnu = sol.rows(d, k).into_owned();
            let jdy = &jh * &dy;
            let ds = -&res.ineq - &jdy;
            let dlam = w.component_mul(&(&res.ineq + &jdy)) - rc.component_div(&pt.s);
            (dy, dnu, ds, dlam)
        };

        let (dy, dnu, ds, dlam) = if m > 0 {
            let rc_aff = pt.s.component_mul(&pt.lam);
            let (_, _, ds_a, dl_a) = direction(&rc_aff);
            let a_aff = max_step(&pt.s, &ds_a).min(max_step(&pt.lam, &dl_a));
            let mu = res.gap;
            let mu_aff = (&pt.s + a_aff * &ds_a).dot(&(&pt.lam + a_aff * &dl_a)) / m as f64;
            let sigma = (mu_aff / mu).clamp(0.0, 1.0).powi(3);
            let rc = rc_aff + ds_a.component_mul(&dl_a) - Vector::from_element(m, sigma * mu);
            direction(&rc)
        } else {
            direction(&Vector::zeros(0))
        };

        let mut alpha = (STEP_TO_BOUNDARY * max_step(&pt.s, &ds).min(max_step(&pt.lam, &dlam))).min(1.0);
        if m == 0 {
            alpha = 1.0;
        }
        let m0 = res.merit();
        let mut next = None;
        for _ in 0..20 {
            let trial = Point {
                y: &pt.y + alpha * &dy,
                s: &pt.s + alpha * &ds,
                lam: &pt.lam + alpha * &dlam,
                nu: &pt.nu + alpha * &dnu,
            };
            let r = residual(&trial);
            if r.merit() <= (1.0 - 1e-4 * alpha) * m0 {
                next = Some((trial, r));
                break;
            }
            alpha *= 0.5;
        }
        match next {
            Some((trial, r)) => {
                pt = trial;
                res = r;
            }
            None => break,
        }
    }

    let mut nu = Vector::zeros(p);
    for (r, &j) in eq_rows.iter().enumerate() {
        nu[j] = pt.nu[r];
    }
    Ok(IpmOutcome {
        y: pt.y,
        slack: pt.s,
        lambda: pt.lam,
        nu,
        iterations,
    })
}
