use crate::error::{check_dim, Error, Result};
use crate::linalg::{saddle_matrix, SymmetricIndefinite};
use crate::{Matrix, Vector};

/// Minimizes `1/2 y^T M y + lin^T y` subject to `beq y = rhs`.
///
/// Returns the minimizer and the multipliers of `M y + lin + beq^T mult = 0`.
/// The saddle matrix is factorized once; one step of iterative refinement is
/// applied to the solution.
pub fn solve_eqp(metric: &Matrix, lin: &Vector, beq: &Matrix, rhs: &Vector) -> Result<(Vector, Vector)> {
    let d = metric.nrows();
    check_dim("eqp metric columns", d, metric.ncols())?;
    check_dim("eqp linear term", d, lin.len())?;
    let k = beq.nrows();
    if k > 0 {
        check_dim("eqp constraint columns", d, beq.ncols())?;
    }
    check_dim("eqp right-hand side", k, rhs.len())?;
    if k > d {
        return Err(Error::RankDeficient {
            pivot: 0.0,
            threshold: 0.0,
        });
    }
    let beq = if k == 0 { Matrix::zeros(0, d) } else { beq.clone() };
    let kkt = saddle_matrix(metric, &beq);
    let fact = SymmetricIndefinite::factor(&kkt)?;
    if fact.inertia() != (d, k) {
        return Err(Error::NotPositiveDefinite(format!(
            "metric is not positive definite on the constraint nullspace (inertia {:?}, want ({d}, {k}))",
            fact.inertia()
        )));
    }
    let mut b = Vector::zeros(d + k);
    b.rows_mut(0, d).copy_from(&(-lin));
    b.rows_mut(d, k).copy_from(rhs);
    let mut z = fact.solve(&b);
    let r = &b - &kkt * &z;
    z += fact.solve(&r);
    Ok((z.rows(0, d).into_owned(), z.rows(d, k).into_owned()))
}
