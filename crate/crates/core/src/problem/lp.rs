use serde::{Deserialize, Serialize};

use super::serde_matrix::vector;
use super::BilevelProblem;
use crate::error::{Error, Result};
use crate::{Matrix, Vector};

/// Regularized LP whose equality-constraint matrix is the parameter:
///
/// ```text
/// g(x, y) = eps/2 |y|^2 + linear_cost^T y
/// A(x)    = A0 + reshape(x)          (p x d, x read row-major)
/// b(x)    = A(x) anchor
/// e(x, y) = A(x) y - b(x) = A(x) (y - anchor)
/// h(y)    = -y                       (only when `nonnegativity`)
/// ```
///
/// Tying `b` to a fixed anchor point keeps every parameter value feasible;
/// with a strictly positive anchor the feasible set has an interior point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintParamLp {
    pub epsilon_reg: f64,
    #[serde(with = "vector")]
    pub linear_cost: Vector,
    pub n_rows: usize,
    #[serde(with = "vector")]
    pub a0: Vector,
    #[serde(with = "vector")]
    pub anchor: Vector,
    pub nonnegativity: bool,
}

impl ConstraintParamLp {
    /// `a0` given as a `p x d` matrix.
    pub fn new(
        epsilon_reg: f64,
        linear_cost: Vector,
        a0: &Matrix,
        anchor: Vector,
        nonnegativity: bool,
    ) -> Self {
        let a0_flat = Vector::from_iterator(
            a0.nrows() * a0.ncols(),
            (0..a0.nrows()).flat_map(|i| (0..a0.ncols()).map(move |j| (i, j))).map(|(i, j)| a0[(i, j)]),
        );
        ConstraintParamLp {
            epsilon_reg,
            linear_cost,
            n_rows: a0.nrows(),
            a0: a0_flat,
            anchor,
            nonnegativity,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LpProblem {
    data: ConstraintParamLp,
    a0: Matrix,
}

pub fn make_constraint_param_lp(spec: ConstraintParamLp) -> Result<LpProblem> {
    let d = spec.linear_cost.len();
    if !(spec.epsilon_reg > 0.0) {
        return Err(Error::NotPositiveDefinite(format!(
            "epsilon_reg = {} must be positive",
            spec.epsilon_reg
        )));
    }
    crate::error::check_dim("anchor length", d, spec.anchor.len())?;
    crate::error::check_dim("A0 entries", spec.n_rows * d, spec.a0.len())?;
    if d == 0 || spec.n_rows == 0 {
        return Err(Error::InvalidArgument(
            "ConstraintParamLp needs d > 0 and at least one constraint row".into(),
        ));
    }
    let a0 = Matrix::from_row_slice(spec.n_rows, d, spec.a0.as_slice());
    Ok(LpProblem { data: spec, a0 })
}

impl LpProblem {
    pub fn data(&self) -> &ConstraintParamLp {
        &self.data
    }

    /// Constraint matrix `A(x)`.
    pub fn constraint_matrix(&self, x: &Vector) -> Matrix {
        let (p, d) = self.a0.shape();
        &self.a0 + Matrix::from_row_slice(p, d, x.as_slice())
    }

    fn d(&self) -> usize {
        self.data.linear_cost.len()
    }
}

impl BilevelProblem for LpProblem {
    fn dim_y(&self) -> usize {
        self.d()
    }
    fn dim_x(&self) -> usize {
        self.data.n_rows * self.d()
    }
    fn n_ineq(&self) -> usize {
        if self.data.nonnegativity {
            self.d()
        } else {
            0
        }
    }
    fn n_eq(&self) -> usize {
        self.data.n_rows
    }
    fn mu_g(&self) -> f64 {
        self.data.epsilon_reg
    }
    fn smoothness(&self) -> Option<f64> {
        Some(self.data.epsilon_reg)
    }

    fn g_value(&self, _x: &Vector, y: &Vector) -> f64 {
        0.5 * self.data.epsilon_reg * y.norm_squared() + self.data.linear_cost.dot(y)
    }
    fn g_grad_y(&self, _x: &Vector, y: &Vector) -> Vector {
        y * self.data.epsilon_reg + &self.data.linear_cost
    }
    fn g_grad_x(&self, _x: &Vector, _y: &Vector) -> Vector {
        Vector::zeros(self.dim_x())
    }
    fn g_hess_yy(&self, _x: &Vector, _y: &Vector) -> Matrix {
        Matrix::identity(self.d(), self.d()) * self.data.epsilon_reg
    }
    fn g_hess_yx(&self, _x: &Vector, _y: &Vector) -> Matrix {
        Matrix::zeros(self.d(), self.dim_x())
    }

    fn h_values(&self, _x: &Vector, y: &Vector) -> Vector {
        if self.data.nonnegativity {
            -y
        } else {
            Vector::zeros(0)
        }
    }
    fn h_jac_y(&self, _x: &Vector, _y: &Vector) -> Matrix {
        let m = self.n_ineq();
        -Matrix::identity(m, self.d())
    }
    fn h_jac_x(&self, _x: &Vector, _y: &Vector) -> Matrix {
        Matrix::zeros(self.n_ineq(), self.dim_x())
    }

    fn e_values(&self, x: &Vector, y: &Vector) -> Vector {
        self.constraint_matrix(x) * (y - &self.data.anchor)
    }
    fn e_jac_y(&self, x: &Vector, _y: &Vector) -> Matrix {
        self.constraint_matrix(x)
    }
    fn e_jac_x(&self, _x: &Vector, y: &Vector) -> Matrix {
        let (p, d) = (self.data.n_rows, self.d());
        let shifted = y - &self.data.anchor;
        let mut jac = Matrix::zeros(p, p * d);
        for i in 0..p {
            for j in 0..d {
                jac[(i, i * d + j)] = shifted[j];
            }
        }
        jac
    }
    fn e_hess_yx_weighted(&self, _x: &Vector, _y: &Vector, w: &Vector) -> Matrix {
        let (p, d) = (self.data.n_rows, self.d());
        let mut hess = Matrix::zeros(d, p * d);
        for i in 0..p {
            for j in 0..d {
                hess[(j, i * d + j)] = w[i];
            }
        }
        hess
    }
}
