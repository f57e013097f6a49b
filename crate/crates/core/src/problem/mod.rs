//! Lower-level problem abstraction and the concrete families used by the
//! benchmarks.
//!
//! A [`BilevelProblem`] exposes the lower-level objective `g(x, y)`, the convex
//! inequalities `h(x, y) <= 0` and the equalities `e(x, y) = 0` (affine in
//! `y`), together with their first derivatives in `x` and `y`. Second
//! derivatives are only consulted by the exact oracles and by the interior
//! point solver.

mod checks;
mod lp;
mod presets;
mod qp;
pub mod serde_matrix;

pub use checks::{check_affine_equalities, verify_derivatives, DerivativeReport};
pub use lp::{make_constraint_param_lp, ConstraintParamLp, LpProblem};
pub use presets::{preset, random_qp, random_qp_with, Circle, Preset, RandomQpOptions};
pub use qp::{make_parametric_qp, ParametricQp, QpProblem};

use crate::error::Result;
use crate::{Matrix, Vector};

/// Exact primal-dual point returned by problems that know their solution in
/// closed form.
#[derive(Debug, Clone)]
pub struct ClosedForm {
    pub y: Vector,
    pub lambda: Vector,
    pub nu: Vector,
}

/// Callback description of the parametric lower-level problem
/// `min_y g(x, y) s.t. h(x, y) <= 0, e(x, y) = 0`.
///
/// Implementations must be immutable after construction; every method is a
/// pure function of its arguments.
pub trait BilevelProblem: Send + Sync {
    fn dim_y(&self) -> usize;
    fn dim_x(&self) -> usize;
    fn n_ineq(&self) -> usize;
    fn n_eq(&self) -> usize;

    /// Declared strong-convexity modulus of `g(x, .)`.
    fn mu_g(&self) -> f64;

    /// Declared smoothness constant of `g(x, .)`, if known.
    fn smoothness(&self) -> Option<f64> {
        None
    }

    fn g_value(&self, x: &Vector, y: &Vector) -> f64;
    fn g_grad_y(&self, x: &Vector, y: &Vector) -> Vector;
    fn g_grad_x(&self, x: &Vector, y: &Vector) -> Vector;
    fn g_hess_yy(&self, x: &Vector, y: &Vector) -> Matrix;
    /// Mixed second derivative, `d x dim_x`.
    fn g_hess_yx(&self, x: &Vector, y: &Vector) -> Matrix;

    fn h_values(&self, x: &Vector, y: &Vector) -> Vector;
    fn h_jac_y(&self, x: &Vector, y: &Vector) -> Matrix;
    fn h_jac_x(&self, x: &Vector, y: &Vector) -> Matrix;

    fn e_values(&self, x: &Vector, y: &Vector) -> Vector;
    fn e_jac_y(&self, x: &Vector, y: &Vector) -> Matrix;
    fn e_jac_x(&self, x: &Vector, y: &Vector) -> Matrix;

    /// `sum_i w_i * d^2 h_i / dy^2`. Zero for affine constraints.
    fn h_hess_yy_weighted(&self, _x: &Vector, _y: &Vector, _w: &Vector) -> Matrix {
        Matrix::zeros(self.dim_y(), self.dim_y())
    }

    /// `sum_i w_i * d^2 h_i / dy dx`, `d x dim_x`.
    fn h_hess_yx_weighted(&self, _x: &Vector, _y: &Vector, _w: &Vector) -> Matrix {
        Matrix::zeros(self.dim_y(), self.dim_x())
    }

    /// `sum_j w_j * d^2 e_j / dy dx`, `d x dim_x`. Non-zero when `x` enters
    /// the equality constraint matrix.
    fn e_hess_yx_weighted(&self, _x: &Vector, _y: &Vector, _w: &Vector) -> Matrix {
        Matrix::zeros(self.dim_y(), self.dim_x())
    }

    /// Exact solution for problems that have one; the solver uses it in
    /// place of the iterative method.
    fn closed_form(&self, _x: &Vector) -> Option<Result<ClosedForm>> {
        None
    }

    /// Hessian of the Lagrangian in `y` for multipliers `(lambda, nu)`.
    fn lagrangian_hess_yy(&self, x: &Vector, y: &Vector, lambda: &Vector) -> Matrix {
        let mut h = self.g_hess_yy(x, y);
        if self.n_ineq() > 0 {
            h += self.h_hess_yy_weighted(x, y, lambda);
        }
        h
    }

    /// Mixed Hessian of the Lagrangian, `d x dim_x`.
    fn lagrangian_hess_yx(&self, x: &Vector, y: &Vector, lambda: &Vector, nu: &Vector) -> Matrix {
        let mut h = self.g_hess_yx(x, y);
        if self.n_ineq() > 0 {
            h += self.h_hess_yx_weighted(x, y, lambda);
        }
        if self.n_eq() > 0 {
            h += self.e_hess_yx_weighted(x, y, nu);
        }
        h
    }
}

impl<P: BilevelProblem + ?Sized> BilevelProblem for &P {
    fn dim_y(&self) -> usize {
        (**self).dim_y()
    }
    fn dim_x(&self) -> usize {
        (**self).dim_x()
    }
    fn n_ineq(&self) -> usize {
        (**self).n_ineq()
    }
    fn n_eq(&self) -> usize {
        (**self).n_eq()
    }
    fn mu_g(&self) -> f64 {
        (**self).mu_g()
    }
    fn smoothness(&self) -> Option<f64> {
        (**self).smoothness()
    }
    fn g_value(&self, x: &Vector, y: &Vector) -> f64 {
        (**self).g_value(x, y)
    }
    fn g_grad_y(&self, x: &Vector, y: &Vector) -> Vector {
        (**self).g_grad_y(x, y)
    }
    fn g_grad_x(&self, x: &Vector, y: &Vector) -> Vector {
        (**self).g_grad_x(x, y)
    }
    fn g_hess_yy(&self, x: &Vector, y: &Vector) -> Matrix {
        (**self).g_hess_yy(x, y)
    }
    fn g_hess_yx(&self, x: &Vector, y: &Vector) -> Matrix {
        (**self).g_hess_yx(x, y)
    }
    fn h_values(&self, x: &Vector, y: &Vector) -> Vector {
        (**self).h_values(x, y)
    }
    fn h_jac_y(&self, x: &Vector, y: &Vector) -> Matrix {
        (**self).h_jac_y(x, y)
    }
    fn h_jac_x(&self, x: &Vector, y: &Vector) -> Matrix {
        (**self).h_jac_x(x, y)
    }
    fn e_values(&self, x: &Vector, y: &Vector) -> Vector {
        (**self).e_values(x, y)
    }
    fn e_jac_y(&self, x: &Vector, y: &Vector) -> Matrix {
        (**self).e_jac_y(x, y)
    }
    fn e_jac_x(&self, x: &Vector, y: &Vector) -> Matrix {
        (**self).e_jac_x(x, y)
    }
    fn h_hess_yy_weighted(&self, x: &Vector, y: &Vector, w: &Vector) -> Matrix {
        (**self).h_hess_yy_weighted(x, y, w)
    }
    fn h_hess_yx_weighted(&self, x: &Vector, y: &Vector, w: &Vector) -> Matrix {
        (**self).h_hess_yx_weighted(x, y, w)
    }
    fn e_hess_yx_weighted(&self, x: &Vector, y: &Vector, w: &Vector) -> Matrix {
        (**self).e_hess_yx_weighted(x, y, w)
    }
    fn closed_form(&self, x: &Vector) -> Option<Result<ClosedForm>> {
        (**self).closed_form(x)
    }
}
