//! Central finite-difference consistency checks for problem callbacks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::BilevelProblem;
use crate::{Matrix, Vector};

#[derive(Debug, Clone)]
pub struct DerivativeReport {
    /// Largest `|fd - analytic|_inf / max(|analytic|_inf, 1)` over all checks.
    pub max_rel_err: f64,
    /// Callback with the largest error.
    pub worst: &'static str,
    pub points: usize,
}

fn random_vector(rng: &mut ChaCha8Rng, n: usize) -> Vector {
    Vector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

fn step(v: f64) -> f64 {
    1e-6 * v.abs().max(1.0)
}

/// Jacobian of `f` at `z` by central differences, `out_dim x z.len()`.
fn fd_jacobian(z: &Vector, out_dim: usize, f: impl Fn(&Vector) -> Vector) -> Matrix {
    let mut jac = Matrix::zeros(out_dim, z.len());
    let mut zp = z.clone();
    for j in 0..z.len() {
        let h = step(z[j]);
        zp[j] = z[j] + h;
        let fp = f(&zp);
        zp[j] = z[j] - h;
        let fm = f(&zp);
        zp[j] = z[j];
        jac.set_column(j, &((fp - fm) / (2.0 * h)));
    }
    jac
}

fn as_row(v: &Vector) -> Matrix {
    Matrix::from_row_slice(1, v.len(), v.as_slice())
}

fn rel_err(fd: &Matrix, analytic: &Matrix) -> f64 {
    if fd.is_empty() {
        return 0.0;
    }
    (fd - analytic).amax() / analytic.amax().max(1.0)
}

/// Compares every derivative callback of `problem` against central finite
/// differences of the callback one order lower, at `n_points` random
/// standard-normal `(x, y)` pairs.
pub fn verify_derivatives(
    problem: &dyn BilevelProblem,
    seed: u64,
    n_points: usize,
) -> DerivativeReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, nx, m, p) = (
        problem.dim_y(),
        problem.dim_x(),
        problem.n_ineq(),
        problem.n_eq(),
    );
    let mut worst = ("none", 0.0);
    let mut record = |name: &'static str, err: f64| {
        if err > worst.1 || err.is_nan() {
            worst = (name, err);
        }
    };
    for _ in 0..n_points {
        let x = random_vector(&mut rng, nx);
        let y = random_vector(&mut rng, d);
        let w_h = random_vector(&mut rng, m);
        let w_e = random_vector(&mut rng, p);
        let scalar = |v: f64| Vector::from_element(1, v);

        let fd = fd_jacobian(&y, 1, |yy| scalar(problem.g_value(&x, yy)));
        record("g_grad_y", rel_err(&fd, &as_row(&problem.g_grad_y(&x, &y))));
        let fd = fd_jacobian(&x, 1, |xx| scalar(problem.g_value(xx, &y)));
        record("g_grad_x", rel_err(&fd, &as_row(&problem.g_grad_x(&x, &y))));
        let fd = fd_jacobian(&y, d, |yy| problem.g_grad_y(&x, yy));
        record("g_hess_yy", rel_err(&fd, &problem.g_hess_yy(&x, &y)));
        let fd = fd_jacobian(&x, d, |xx| problem.g_grad_y(xx, &y));
        record("g_hess_yx", rel_err(&fd, &problem.g_hess_yx(&x, &y)));

        if m > 0 {
            let fd = fd_jacobian(&y, m, |yy| problem.h_values(&x, yy));
            record("h_jac_y", rel_err(&fd, &problem.h_jac_y(&x, &y)));
            let fd = fd_jacobian(&x, m, |xx| problem.h_values(xx, &y));
            record("h_jac_x", rel_err(&fd, &problem.h_jac_x(&x, &y)));
            let fd = fd_jacobian(&y, d, |yy| problem.h_jac_y(&x, yy).tr_mul(&w_h));
            record(
                "h_hess_yy_weighted",
                rel_err(&fd, &problem.h_hess_yy_weighted(&x, &y, &w_h)),
            );
            let fd = fd_jacobian(&x, d, |xx| problem.h_jac_y(xx, &y).tr_mul(&w_h));
            record(
                "h_hess_yx_weighted",
                rel_err(&fd, &problem.h_hess_yx_weighted(&x, &y, &w_h)),
            );
        }
        if p > 0 {
            let fd = fd_jacobian(&y, p, |yy| problem.e_values(&x, yy));
            record("e_jac_y", rel_err(&fd, &problem.e_jac_y(&x, &y)));
            let fd = fd_jacobian(&x, p, |xx| problem.e_values(xx, &y));
            record("e_jac_x", rel_err(&fd, &problem.e_jac_x(&x, &y)));
            let fd = fd_jacobian(&x, d, |xx| problem.e_jac_y(xx, &y).tr_mul(&w_e));
            record(
                "e_hess_yx_weighted",
                rel_err(&fd, &problem.e_hess_yx_weighted(&x, &y, &w_e)),
            );
        }
    }
    DerivativeReport {
        max_rel_err: worst.1,
        worst: worst.0,
        points: n_points,
    }
}

/// Largest entrywise change of `e_jac_y` between two random `y` at fixed `x`;
/// zero when the equalities are affine in `y`.
pub fn check_affine_equalities(problem: &dyn BilevelProblem, x: &Vector, seed: u64) -> f64 {
    if problem.n_eq() == 0 {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y1 = random_vector(&mut rng, problem.dim_y());
    let y2 = random_vector(&mut rng, problem.dim_y());
    (problem.e_jac_y(x, &y1) - problem.e_jac_y(x, &y2)).amax()
}
