//! Built-in fixtures: the one-dimensional "wall" and "circle" problems with
//! known hypergradients, and seeded random QPs with a planted optimum.

use nalgebra::QR;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{make_parametric_qp, BilevelProblem, ClosedForm, ParametricQp, QpProblem};
use crate::error::{Error, Result};
use crate::{Matrix, Vector};

#[derive(Debug, Clone, PartialEq)]
pub enum Preset {
    /// `g = 1/2 (y - a)^2`, `h = y - a x`, needs `a > 1`.
    Wall { a: f64 },
    /// `g = (y - 2)^2`, `h = x^2 + y^2 - 1`.
    Circle,
    RandomQp {
        seed: u64,
        d: usize,
        m: usize,
        p: usize,
    },
}

impl Preset {
    /// Resolves a preset by CLI name (`wall`, `circle`, `random-qp`).
    pub fn by_name(name: &str, a: f64, seed: u64, d: usize, m: usize, p: usize) -> Result<Self> {
        match name {
            "wall" => Ok(Preset::Wall { a }),
            "circle" => Ok(Preset::Circle),
            "random-qp" | "random_qp" => Ok(Preset::RandomQp { seed, d, m, p }),
            other => Err(Error::UnknownPreset(other.to_string())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Preset::Wall { .. } => "wall",
            Preset::Circle => "circle",
            Preset::RandomQp { .. } => "random-qp",
        }
    }
}

/// Builds the problem for a preset.
pub fn preset(which: &Preset) -> Result<Box<dyn BilevelProblem>> {
    match *which {
        Preset::Wall { a } => Ok(Box::new(wall(a)?)),
        Preset::Circle => Ok(Box::new(Circle)),
        Preset::RandomQp { seed, d, m, p } => Ok(Box::new(random_qp(seed, d, m, p)?)),
    }
}

/// The wall problem as a QP. Its objective is `1/2 y^2 - a y`, which equals
/// `1/2 (y - a)^2` up to the constant `a^2 / 2`.
pub fn wall(a: f64) -> Result<QpProblem> {
    if !(a > 1.0) {
        return Err(Error::InvalidArgument(format!("wall needs a > 1, got {a}")));
    }
    let one = |v: f64| Matrix::from_element(1, 1, v);
    make_parametric_qp(
        ParametricQp::unconstrained(one(1.0), one(0.0), Vector::from_element(1, -a))
            .with_inequalities(one(1.0), Vector::zeros(1), one(a)),
    )
}

/// `g = (y - 2)^2`, `h = x^2 + y^2 - 1`; the lower solution is
/// `y* = sqrt(1 - x^2)` so the value function has an unbounded slope at
/// `|x| -> 1`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Circle;

impl BilevelProblem for Circle {
    fn dim_y(&self) -> usize {
        1
    }
    fn dim_x(&self) -> usize {
        1
    }
    fn n_ineq(&self) -> usize {
        1
    }
    fn n_eq(&self) -> usize {
        0
    }
    fn mu_g(&self) -> f64 {
        2.0
    }
    fn smoothness(&self) -> Option<f64> {
        Some(2.0)
    }

    fn g_value(&self, _x: &Vector, y: &Vector) -> f64 {
        (y[0] - 2.0).powi(2)
    }
    fn g_grad_y(&self, _x: &Vector, y: &Vector) -> Vector {
        Vector::from_element(1, 2.0 * (y[0] - 2.0))
    }
    fn g_grad_x(&self, _x: &Vector, _y: &Vector) -> Vector {
        Vector::zeros(1)
    }
    fn g_hess_yy(&self, _x: &Vector, _y: &Vector) -> Matrix {
        Matrix::from_element(1, 1, 2.0)
    }
    fn g_hess_yx(&self, _x: &Vector, _y: &Vector) -> Matrix {
        Matrix::zeros(1, 1)
    }
    fn h_values(&self, x: &Vector, y: &Vector) -> Vector {
        Vector::from_element(1, x[0] * x[0] + y[0] * y[0] - 1.0)
    }
    fn h_jac_y(&self, _x: &Vector, y: &Vector) -> Matrix {
        Matrix::from_element(1, 1, 2.0 * y[0])
    }
    fn h_jac_x(&self, x: &Vector, _y: &Vector) -> Matrix {
        Matrix::from_element(1, 1, 2.0 * x[0])
    }
    fn e_values(&self, _x: &Vector, _y: &Vector) -> Vector {
        Vector::zeros(0)
    }
    fn e_jac_y(&self, _x: &Vector, _y: &Vector) -> Matrix {
        Matrix::zeros(0, 1)
    }
    fn e_jac_x(&self, _x: &Vector, _y: &Vector) -> Matrix {
        Matrix::zeros(0, 1)
    }
    fn h_hess_yy_weighted(&self, _x: &Vector, _y: &Vector, w: &Vector) -> Matrix {
        Matrix::from_element(1, 1, 2.0 * w[0])
    }

    fn closed_form(&self, x: &Vector) -> Option<Result<ClosedForm>> {
        let r2 = 1.0 - x[0] * x[0];
        if r2 <= 0.0 {
            return Some(Err(Error::Infeasible(format!(
                "circle has no interior at x = {} (LICQ fails on |x| >= 1)",
                x[0]
            ))));
        }
        // The unconstrained minimizer y = 2 lies outside the disc, so the
        // constraint is always active at the nearest boundary point.
        let y = r2.sqrt();
        let lambda = (2.0 - y) / y;
        Some(Ok(ClosedForm {
            y: Vector::from_element(1, y),
            lambda: Vector::from_element(1, lambda),
            nu: Vector::zeros(0),
        }))
    }
}

/// Options for the planted-optimum random QP generator.
#[derive(Debug, Clone)]
pub struct RandomQpOptions {
    pub seed: u64,
    pub d: usize,
    pub m: usize,
    pub p: usize,
    /// Parameter dimension; defaults to `d`.
    pub dim_x: Option<usize>,
    /// Number of inequalities active at `x = 0`; defaults to
    /// `min(ceil(m / 2), d - p - 1)`.
    pub active: Option<usize>,
    /// Upper bound on the condition number of `Q`.
    pub cond: f64,
}

impl RandomQpOptions {
    pub fn new(seed: u64, d: usize, m: usize, p: usize) -> Self {
        RandomQpOptions {
            seed,
            d,
            m,
            p,
            dim_x: None,
            active: None,
            cond: 100.0,
        }
    }
}

pub fn random_qp(seed: u64, d: usize, m: usize, p: usize) -> Result<QpProblem> {
    random_qp_with(&RandomQpOptions::new(seed, d, m, p))
}

/// Draws a QP whose optimum at `x = 0` is planted: a random `y*`, a chosen
/// set of active inequalities with multipliers in `[0.5, 2]`, inactive
/// slacks in `[0.5, 2]`, and `q0` set so stationarity holds. The
/// x-dependence of the right-hand sides follows a feasible path `y0 + R x`,
/// so every `x` admits a strictly feasible point whenever `x = 0` does.
pub fn random_qp_with(opts: &RandomQpOptions) -> Result<QpProblem> {
    let RandomQpOptions { seed, d, m, p, .. } = *opts;
    let dim_x = opts.dim_x.unwrap_or(d);
    if d == 0 || dim_x == 0 {
        return Err(Error::InvalidArgument("random_qp needs d > 0".into()));
    }
    if p >= d {
        return Err(Error::InvalidArgument(format!(
            "random_qp needs p < d (p = {p}, d = {d})"
        )));
    }
    let default_active = m.div_ceil(2).min(d.saturating_sub(p + 1));
    let n_active = opts.active.unwrap_or(default_active).min(m);
    if n_active + p > d {
        return Err(Error::InvalidArgument(format!(
            "{n_active} active inequalities plus {p} equalities exceed d = {d}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gauss = |r: usize, c: usize| -> Matrix {
        Matrix::from_fn(r, c, |_, _| StandardNormal.sample(&mut rng))
    };

    let basis = QR::new(gauss(d, d)).q();
    let q_eigs = gauss(d, 1);
    let log_cond = opts.cond.max(1.0).log10();
    let eigs = Vector::from_fn(d, |i, _| {
        // squash a normal draw into [0, 1] deterministically
        let t = 0.5 * (1.0 + (q_eigs[(i, 0)] / 2f64.sqrt()).tanh());
        10f64.powf(log_cond * t)
    });
    let mut q = &basis * Matrix::from_diagonal(&eigs) * basis.transpose();
    q = 0.5 * (&q + q.transpose());

    let y_star = gauss(d, 1).column(0).into_owned();
    let mut g_ineq = gauss(m, d);
    for mut row in g_ineq.row_iter_mut() {
        let n = row.norm();
        row /= n;
    }
    let a_eq = gauss(p, d);
    let path = gauss(d, dim_x) * 0.5;
    let p_mat = gauss(d, dim_x);
    let nu = gauss(p, 1).column(0).into_owned();

    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut rng);
    let mut lambda = Vector::zeros(m);
    let mut slack = Vector::zeros(m);
    for (rank, &i) in order.iter().enumerate() {
        let v = rng.random_range(0.5..2.0);
        if rank < n_active {
            lambda[i] = v;
        } else {
            slack[i] = v;
        }
    }

    let h0 = &g_ineq * &y_star + &slack;
    let h_x = &g_ineq * &path;
    let b0 = &a_eq * &y_star;
    let b_x = &a_eq * &path;
    let q0 = -(&q * &y_star + g_ineq.tr_mul(&lambda) + a_eq.tr_mul(&nu));

    make_parametric_qp(
        ParametricQp::unconstrained(q, p_mat, q0)
            .with_inequalities(g_ineq, h0, h_x)
            .with_equalities(a_eq, b0, b_x),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::sym_eig_range;
    use crate::problem::{check_affine_equalities, verify_derivatives};

    #[test]
    fn presets_pass_derivative_checks() {
        for which in [
            Preset::Wall { a: 100.0 },
            Preset::Circle,
            Preset::RandomQp {
                seed: 0,
                d: 5,
                m: 3,
                p: 1,
            },
        ] {
            let problem = preset(&which).unwrap();
            let report = verify_derivatives(problem.as_ref(), 11, 100);
            assert!(report.max_rel_err <= 1e-5, "{which:?}: {report:?}");
            let x = Vector::zeros(problem.dim_x());
            assert!(check_affine_equalities(problem.as_ref(), &x, 1) == 0.0);
        }
    }

    #[test]
    fn random_qp_is_deterministic_and_well_conditioned() {
        let a = random_qp(0, 4, 2, 1).unwrap();
        let b = random_qp(0, 4, 2, 1).unwrap();
        assert_eq!(a.data(), b.data());
        let (lo, hi) = sym_eig_range(&a.data().q);
        assert!(hi / lo <= 100.0 + 1e-9);
        assert!((a.mu_g() - lo).abs() < 1e-12);
        let c = random_qp(1, 4, 2, 1).unwrap();
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn qp_realizes_declared_modulus() {
        let qp = random_qp(5, 6, 4, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let y = Vector::from_fn(6, |_, _| StandardNormal.sample(&mut rng));
            let curv = y.dot(&(&qp.data().q * &y));
            assert!(curv >= qp.mu_g() * y.norm_squared() * (1.0 - 1e-12));
        }
    }

    #[test]
    fn unknown_preset_name() {
        let err = Preset::by_name("torus", 1.0, 0, 1, 1, 0).unwrap_err();
        assert!(matches!(err, Error::UnknownPreset(_)));
        assert!(wall(1.0).is_err());
    }

    #[test]
    fn circle_closed_form() {
        let sol = Circle.closed_form(&Vector::from_element(1, 0.6)).unwrap().unwrap();
        assert!((sol.y[0] - 0.8).abs() < 1e-15);
        assert!((sol.lambda[0] - 1.5).abs() < 1e-14);
        assert!(Circle.closed_form(&Vector::from_element(1, 1.0)).unwrap().is_err());
    }
}
