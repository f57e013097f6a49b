//! Randomized constraint-perturbation estimator.
//!
//! Each sample shifts the inequalities to `h_i(x, y) <= eta_i |grad_y h_i|`
//! with `eta ~ U[-rho, rho]^m` and runs the first-order oracle on the shifted
//! problem. Averaging over samples estimates the gradient of the smoothed
//! value function, which is well defined even where the active set changes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{check_dim, Error, Result};
use crate::hypergradient::ffo_hypergradient;
use crate::parallel::{map_indexed, Execution};
use crate::problem::serde_matrix::vector;
use crate::problem::BilevelProblem;
use crate::solver::{solve_lower, SolverConfig};
use crate::{Matrix, Vector};

#[derive(Debug, Clone, Serialize)]
pub struct SmoothedConfig {
    pub rho: f64,
    pub n_samples: usize,
    pub seed: u64,
    /// Accuracy handed to the per-sample first-order oracle.
    pub inner_eps: f64,
}

impl SmoothedConfig {
    /// `inner_eps` defaults to `rho * 1e-3 / m`, small enough that a union
    /// bound over the `m` constraints keeps every sample accurate.
    pub fn new(rho: f64, n_samples: usize, seed: u64, m: usize) -> Self {
        SmoothedConfig {
            rho,
            n_samples,
            seed,
            inner_eps: rho * 1e-3 / m.max(1) as f64,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0) || self.n_samples == 0 || !(self.inner_eps > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "smoothing needs rho > 0, n_samples >= 1, inner_eps > 0 (got {}, {}, {})",
                self.rho, self.n_samples, self.inner_eps
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SmoothedEstimate {
    #[serde(with = "vector")]
    pub grad: Vector,
    /// Per-coordinate standard error of the mean; infinite for one sample.
    #[serde(with = "vector")]
    pub stderr: Vector,
    /// Samples whose shifted problem had an ambiguous active set.
    pub n_degenerate: usize,
}

/// Inequalities shifted by a fixed offset; everything else forwarded.
struct Shifted<'a> {
    inner: &'a dyn BilevelProblem,
    shift: Vector,
}

impl BilevelProblem for Shifted<'_> {
    fn dim_y(&self) -> usize {
        self.inner.dim_y()
    }
    fn dim_x(&self) -> usize {
        self.inner.dim_x()
    }
    fn n_ineq(&self) -> usize {
        self.inner.n_ineq()
    }
    fn n_eq(&self) -> usize {
        self.inner.n_eq()
    }
    fn mu_g(&self) -> f64 {
        self.inner.mu_g()
    }
    fn smoothness(&self) -> Option<f64> {
        self.inner.smoothness()
    }
    fn g_value(&self, x: &Vector, y: &Vector) -> f64 {
        self.inner.g_value(x, y)
    }
    fn g_grad_y(&self, x: &Vector, y: &Vector) -> Vector {
        self.inner.g_grad_y(x, y)
    }
    fn g_grad_x(&self, x: &Vector, y: &Vector) -> Vector {
        self.inner.g_grad_x(x, y)
    }
    fn g_hess_yy(&self, x: &Vector, y: &Vector) -> Matrix {
        self.inner.g_hess_yy(x, y)
    }
    fn g_hess_yx(&self, x: &Vector, y: &Vector) -> Matrix {
        self.inner.g_hess_yx(x, y)
    }
    fn h_values(&self, x: &Vector, y: &Vector) -> Vector {
        self.inner.h_values(x, y) - &self.shift
    }
    fn h_jac_y(&self, x: &Vector, y: &Vector) -> Matrix {
        self.inner.h_jac_y(x, y)
    }
    fn h_jac_x(&self, x: &Vector, y: &Vector) -> Matrix {
        self.inner.h_jac_x(x, y)
    }
    fn e_values(&self, x: &Vector, y: &Vector) -> Vector {
        self.inner.e_values(x, y)
    }
    fn e_jac_y(&self, x: &Vector, y: &Vector) -> Matrix {
        self.inner.e_jac_y(x, y)
    }
    fn e_jac_x(&self, x: &Vector, y: &Vector) -> Matrix {
        self.inner.e_jac_x(x, y)
    }
    fn h_hess_yy_weighted(&self, x: &Vector, y: &Vector, w: &Vector) -> Matrix {
        self.inner.h_hess_yy_weighted(x, y, w)
    }
    fn h_hess_yx_weighted(&self, x: &Vector, y: &Vector, w: &Vector) -> Matrix {
        self.inner.h_hess_yx_weighted(x, y, w)
    }
    fn e_hess_yx_weighted(&self, x: &Vector, y: &Vector, w: &Vector) -> Matrix {
        self.inner.e_hess_yx_weighted(x, y, w)
    }
}

/// The uniform draw for one sample; depends only on `(seed, index)`.
pub fn sample_eta(seed: u64, index: u64, m: usize, rho: f64) -> Vector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    Vector::from_fn(m, |_, _| rng.random_range(-rho..rho))
}

pub fn smoothed_hypergradient(
    problem: &dyn BilevelProblem,
    x: &Vector,
    c: &Vector,
    direct: &Vector,
    cfg: &SmoothedConfig,
) -> Result<SmoothedEstimate> {
    smoothed_hypergradient_with(problem, x, c, direct, cfg, &SolverConfig::oracle(), Execution::default())
}

pub fn smoothed_hypergradient_with(
    problem: &dyn BilevelProblem,
    x: &Vector,
    c: &Vector,
    direct: &Vector,
    cfg: &SmoothedConfig,
    solver: &SolverConfig,
    exec: Execution,
) -> Result<SmoothedEstimate> {
    cfg.validate()?;
    check_dim("x", problem.dim_x(), x.len())?;
    check_dim("c", problem.dim_y(), c.len())?;
    check_dim("direct", problem.dim_x(), direct.len())?;
    let m = problem.n_ineq();
    if m == 0 {
        return Err(Error::InvalidArgument(
            "smoothing needs at least one inequality".into(),
        ));
    }
    // row norms fixed at the unshifted optimum so that rho is measured in
    // distance along each constraint normal
    let base = solve_lower(problem, x, solver)?;
    let scale = problem
        .h_jac_y(x, &base.y)
        .row_iter()
        .map(|r| r.norm())
        .collect::<Vec<_>>();

    let results = map_indexed(cfg.n_samples, exec, |i| {
        let eta = sample_eta(cfg.seed, i as u64, m, cfg.rho);
        let shift = Vector::from_fn(m, |j, _| eta[j] * scale[j]);
        let shifted = Shifted {
            inner: problem,
            shift,
        };
        ffo_hypergradient(&shifted, x, c, direct, cfg.inner_eps, solver)
    });

    let n = cfg.n_samples as f64;
    let mut sum = Vector::zeros(problem.dim_x());
    let mut grads = Vec::with_capacity(cfg.n_samples);
    let mut n_degenerate = 0;
    for r in results {
        let r = r?;
        n_degenerate += r.active.degenerate as usize;
        sum += &r.grad;
        grads.push(r.grad);
    }
    let mean = sum / n;
    let stderr = if cfg.n_samples > 1 {
        let mut var = Vector::zeros(mean.len());
        for g in &grads {
            let d = g - &mean;
            var += d.component_mul(&d);
        }
        (var / (n - 1.0)).map(|v| (v / n).sqrt())
    } else {
        Vector::from_element(mean.len(), f64::INFINITY)
    };
    Ok(SmoothedEstimate {
        grad: mean,
        stderr,
        n_degenerate,
    })
}
