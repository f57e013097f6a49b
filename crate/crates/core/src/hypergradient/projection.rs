use crate::active_set::GhostProblem;
use crate::error::{check_dim, Error, Result};
use crate::linalg::{pinv_solve_matrix, saddle_matrix, SymmetricIndefinite};
use crate::{Matrix, Vector};

/// Projection onto `{y : B y = 0}` in the norm induced by `metric`, with the
/// saddle matrix factorized once for repeated use.
pub struct MetricProjector {
    fact: SymmetricIndefinite,
    metric: Matrix,
    k: usize,
}

impl MetricProjector {
    pub fn new(metric: &Matrix, b: &Matrix) -> Result<Self> {
        let d = metric.nrows();
        check_dim("metric columns", d, metric.ncols())?;
        let b = if b.nrows() == 0 { Matrix::zeros(0, d) } else { b.clone() };
        check_dim("constraint columns", d, b.ncols())?;
        let k = b.nrows();
        let fact = SymmetricIndefinite::factor(&saddle_matrix(metric, &b))?;
        if fact.inertia() != (d, k) {
            return Err(Error::NotPositiveDefinite(
                "projection metric on the constraint nullspace".into(),
            ));
        }
        Ok(MetricProjector {
            fact,
            metric: metric.clone(),
            k,
        })
    }

    pub fn project(&self, z: &Vector) -> Vector {
        let d = self.metric.nrows();
        let mut rhs = Vector::zeros(d + self.k);
        rhs.rows_mut(0, d).copy_from(&(&self.metric * z));
        self.fact.solve(&rhs).rows(0, d).into_owned()
    }
}

/// `argmin_{B y = 0} (y - z)^T metric (y - z)`.
pub fn project_metric_nullspace(metric: &Matrix, b: &Matrix, z: &Vector) -> Result<Vector> {
    check_dim("z", metric.nrows(), z.len())?;
    Ok(MetricProjector::new(metric, b)?.project(z))
}

/// `dy/dx = P(-H^{-1} H_yx) + (I - P)(B^+ (-A))` where `P` projects onto the
/// nullspace of `B` in the `H` metric. The sign on `A` follows the ghost
/// constraint `B (y - y0) + A (x - x0) = 0`.
pub fn projection_jacobian(ghost: &GhostProblem<'_>, hess_yy: &Matrix, hess_yx: &Matrix) -> Result<Matrix> {
    let d = hess_yy.nrows();
    check_dim("hess_yx rows", d, hess_yx.nrows())?;
    if !ghost.rank_certified {
        return Err(Error::RankDeficient {
            pivot: ghost.sigma_min,
            threshold: 1e-8 * crate::linalg::spectral_norm(&ghost.b_tilde),
        });
    }
    let chol = hess_yy
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("ghost Hessian".into()))?;
    let free = -chol.solve(hess_yx);
    let pinned = pinv_solve_matrix(&ghost.b_tilde, &(-&ghost.a_tilde));
    let proj = MetricProjector::new(hess_yy, &ghost.b_tilde)?;
    let mut out = pinned.clone();
    for j in 0..hess_yx.ncols() {
        let diff: Vector = free.column(j) - pinned.column(j);
        let col = out.column(j) + proj.project(&diff);
        out.set_column(j, &col);
    }
    Ok(out)
}
