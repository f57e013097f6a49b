use nalgebra::Cholesky;
use serde::{Deserialize, Serialize};

use super::serde_matrix::{matrix_from_rows, matrix_to_rows};
use super::BilevelProblem;
use crate::error::{Error, Result};
use crate::linalg::sym_eig_range;
use crate::{Matrix, Vector};

/// Right-hand-side parametric QP:
///
/// ```text
/// g(x, y) = 1/2 y^T Q y + (q0 + P x)^T y
/// h(x, y) = G_ineq y - h0 - H_x x        (<= 0)
/// e(x, y) = A_eq y - b0 - B_x x          (= 0)
/// ```
///
/// Serialized with matrices as row-major nested arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawQp", into = "RawQp")]
pub struct ParametricQp {
    pub q: Matrix,
    pub p: Matrix,
    pub q0: Vector,
    pub g_ineq: Matrix,
    pub h0: Vector,
    pub h_x: Matrix,
    pub a_eq: Matrix,
    pub b0: Vector,
    pub b_x: Matrix,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawQp {
    #[serde(rename = "Q")]
    q: Vec<Vec<f64>>,
    #[serde(rename = "P")]
    p: Vec<Vec<f64>>,
    q0: Vec<f64>,
    #[serde(rename = "G_ineq", default)]
    g_ineq: Vec<Vec<f64>>,
    #[serde(default)]
    h0: Vec<f64>,
    #[serde(rename = "H_x", default)]
    h_x: Vec<Vec<f64>>,
    #[serde(rename = "A_eq", default)]
    a_eq: Vec<Vec<f64>>,
    #[serde(default)]
    b0: Vec<f64>,
    #[serde(rename = "B_x", default)]
    b_x: Vec<Vec<f64>>,
}

impl From<ParametricQp> for RawQp {
    fn from(qp: ParametricQp) -> Self {
        RawQp {
            q: matrix_to_rows(&qp.q),
            p: matrix_to_rows(&qp.p),
            q0: qp.q0.as_slice().to_vec(),
            g_ineq: matrix_to_rows(&qp.g_ineq),
            h0: qp.h0.as_slice().to_vec(),
            h_x: matrix_to_rows(&qp.h_x),
            a_eq: matrix_to_rows(&qp.a_eq),
            b0: qp.b0.as_slice().to_vec(),
            b_x: matrix_to_rows(&qp.b_x),
        }
    }
}

impl TryFrom<RawQp> for ParametricQp {
    type Error = String;

    fn try_from(raw: RawQp) -> std::result::Result<Self, String> {
        let d = raw.q.len();
        let dim_x = raw.p.first().map_or(0, Vec::len);
        let qp = ParametricQp {
            q: matrix_from_rows(&raw.q, d)?,
            p: matrix_from_rows(&raw.p, dim_x)?,
            q0: Vector::from_vec(raw.q0),
            g_ineq: matrix_from_rows(&raw.g_ineq, d)?,
            h0: Vector::from_vec(raw.h0),
            h_x: matrix_from_rows(&raw.h_x, dim_x)?,
            a_eq: matrix_from_rows(&raw.a_eq, d)?,
            b0: Vector::from_vec(raw.b0),
            b_x: matrix_from_rows(&raw.b_x, dim_x)?,
        };
        qp.validate().map_err(|e| e.to_string())?;
        Ok(qp)
    }
}

impl ParametricQp {
    /// Unconstrained QP with the given objective data.
    pub fn unconstrained(q: Matrix, p: Matrix, q0: Vector) -> Self {
        let (d, dim_x) = (q.nrows(), p.ncols());
        ParametricQp {
            q,
            p,
            q0,
            g_ineq: Matrix::zeros(0, d),
            h0: Vector::zeros(0),
            h_x: Matrix::zeros(0, dim_x),
            a_eq: Matrix::zeros(0, d),
            b0: Vector::zeros(0),
            b_x: Matrix::zeros(0, dim_x),
        }
    }

    pub fn with_inequalities(mut self, g_ineq: Matrix, h0: Vector, h_x: Matrix) -> Self {
        self.g_ineq = g_ineq;
        self.h0 = h0;
        self.h_x = h_x;
        self
    }

    pub fn with_equalities(mut self, a_eq: Matrix, b0: Vector, b_x: Matrix) -> Self {
        self.a_eq = a_eq;
        self.b0 = b0;
        self.b_x = b_x;
        self
    }

    pub fn dim_y(&self) -> usize {
        self.q.nrows()
    }

    pub fn dim_x(&self) -> usize {
        self.p.ncols()
    }

    /// Shape and finiteness checks (positive definiteness is checked by
    /// [`make_parametric_qp`]).
    pub fn validate(&self) -> Result<()> {
        let d = self.q.nrows();
        let dim_x = self.p.ncols();
        let m = self.g_ineq.nrows();
        let p = self.a_eq.nrows();
        let shapes: [(&'static str, usize, usize); 12] = [
            ("Q columns", d, self.q.ncols()),
            ("P rows", d, self.p.nrows()),
            ("q0 length", d, self.q0.len()),
            ("G_ineq columns", d, self.g_ineq.ncols()),
            ("h0 length", m, self.h0.len()),
            ("H_x rows", m, self.h_x.nrows()),
            ("H_x columns", dim_x, self.h_x.ncols()),
            ("A_eq columns", d, self.a_eq.ncols()),
            ("b0 length", p, self.b0.len()),
            ("B_x rows", p, self.b_x.nrows()),
            ("B_x columns", dim_x, self.b_x.ncols()),
            ("dim_x positive", 1, usize::from(dim_x > 0 && d > 0)),
        ];
        for (context, expected, actual) in shapes {
            crate::error::check_dim(context, expected, actual)?;
        }
        let finite = [&self.q, &self.p, &self.g_ineq, &self.h_x, &self.a_eq, &self.b_x]
            .iter()
            .all(|m| m.iter().all(|v| v.is_finite()))
            && [&self.q0, &self.h0, &self.b0]
                .iter()
                .all(|v| v.iter().all(|x| x.is_finite()));
        if !finite {
            return Err(Error::InvalidArgument("QP data contains non-finite entries".into()));
        }
        Ok(())
    }
}

/// Validated [`ParametricQp`] realizing [`BilevelProblem`].
#[derive(Debug, Clone)]
pub struct QpProblem {
    data: ParametricQp,
    mu_g: f64,
    c_g: f64,
}

/// Checks `spec` and returns the callback view of the QP with
/// `mu_g = lambda_min(Q)`.
pub fn make_parametric_qp(spec: ParametricQp) -> Result<QpProblem> {
    spec.validate()?;
    let sym_err = (&spec.q - spec.q.transpose()).amax();
    if sym_err > 1e-12 * spec.q.amax().max(1.0) {
        return Err(Error::NotPositiveDefinite(format!(
            "Q is not symmetric (asymmetry {sym_err:.3e})"
        )));
    }
    if Cholesky::new(spec.q.clone()).is_none() {
        return Err(Error::NotPositiveDefinite("Cholesky of Q failed".into()));
    }
    let (mu_g, c_g) = sym_eig_range(&spec.q);
    if mu_g <= 0.0 {
        return Err(Error::NotPositiveDefinite(format!(
            "lambda_min(Q) = {mu_g:.3e}"
        )));
    }
    Ok(QpProblem {
        data: spec,
        mu_g,
        c_g,
    })
}

impl QpProblem {
    pub fn data(&self) -> &ParametricQp {
        &self.data
    }

    /// Linear cost `q0 + P x`.
    pub fn linear_term(&self, x: &Vector) -> Vector {
        &self.data.q0 + &self.data.p * x
    }
}

impl BilevelProblem for QpProblem {
    fn dim_y(&self) -> usize {
        self.data.dim_y()
    }
    fn dim_x(&self) -> usize {
        self.data.dim_x()
    }
    fn n_ineq(&self) -> usize {
        self.data.g_ineq.nrows()
    }
    fn n_eq(&self) -> usize {
        self.data.a_eq.nrows()
    }
    fn mu_g(&self) -> f64 {
        self.mu_g
    }
    fn smoothness(&self) -> Option<f64> {
        Some(self.c_g)
    }

    fn g_value(&self, x: &Vector, y: &Vector) -> f64 {
        0.5 * y.dot(&(&self.data.q * y)) + self.linear_term(x).dot(y)
    }
    fn g_grad_y(&self, x: &Vector, y: &Vector) -> Vector {
        &self.data.q * y + self.linear_term(x)
    }
    fn g_grad_x(&self, _x: &Vector, y: &Vector) -> Vector {
        self.data.p.tr_mul(y)
    }
    fn g_hess_yy(&self, _x: &Vector, _y: &Vector) -> Matrix {
        self.data.q.clone()
    }
    fn g_hess_yx(&self, _x: &Vector, _y: &Vector) -> Matrix {
        self.data.p.clone()
    }

    fn h_values(&self, x: &Vector, y: &Vector) -> Vector {
        &self.data.g_ineq * y - &self.data.h0 - &self.data.h_x * x
    }
    fn h_jac_y(&self, _x: &Vector, _y: &Vector) -> Matrix {
        self.data.g_ineq.clone()
    }
    fn h_jac_x(&self, _x: &Vector, _y: &Vector) -> Matrix {
        -&self.data.h_x
    }

    fn e_values(&self, x: &Vector, y: &Vector) -> Vector {
        &self.data.a_eq * y - &self.data.b0 - &self.data.b_x * x
    }
    fn e_jac_y(&self, _x: &Vector, _y: &Vector) -> Matrix {
        self.data.a_eq.clone()
    }
    fn e_jac_x(&self, _x: &Vector, _y: &Vector) -> Matrix {
        -&self.data.b_x
    }
}
