//! Synthetic decision-focused learning task.
//!
//! Lower level: `min_y 1/2 y^T Q y - q^T y  s.t.  G y <= h`, where the cost
//! vector `q = W f + b` is predicted from features `f`. The outer loss
//! `target^T y*` rewards decisions that are cheap under the true cost.

use nalgebra::QR;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::json;

use super::{LowerLevel, Loss, Model, Sample, TaskKind, TaskSpec};
use crate::error::{Error, Result};
use crate::problem::{make_parametric_qp, ParametricQp};
use crate::{Matrix, Vector};

#[derive(Debug, Clone)]
pub struct DflOptions {
    pub seed: u64,
    pub n_samples: usize,
    pub dim_x: usize,
    pub dim_y: usize,
    pub m_ineq: usize,
    /// Standard deviation of the target noise.
    pub noise: f64,
    /// Standard deviation of the perturbation of the initial weights away
    /// from the true cost map.
    pub init_noise: f64,
}

impl DflOptions {
    pub fn new(seed: u64, n_samples: usize, dim_x: usize, dim_y: usize, m_ineq: usize) -> Self {
        DflOptions {
            seed,
            n_samples,
            dim_x,
            dim_y,
            m_ineq,
            noise: 0.1,
            init_noise: 0.1,
        }
    }
}

/// `dim_x` is the feature dimension; the lower-level parameter is the
/// predicted cost in `R^{dim_y}`.
pub fn dfl_task(seed: u64, n_samples: usize, dim_x: usize, dim_y: usize, m_ineq: usize) -> Result<TaskSpec> {
    dfl_task_with(&DflOptions::new(seed, n_samples, dim_x, dim_y, m_ineq))
}

pub fn dfl_task_with(o: &DflOptions) -> Result<TaskSpec> {
    if o.n_samples == 0 || o.dim_x == 0 || o.dim_y == 0 {
        return Err(Error::InvalidArgument(
            "dfl_task needs positive sample count and dimensions".into(),
        ));
    }
    let (d, nf, m) = (o.dim_y, o.dim_x, o.m_ineq);
    let mut rng = ChaCha8Rng::seed_from_u64(o.seed);
    let mut gauss = |r: usize, c: usize| -> Matrix { Matrix::from_fn(r, c, |_, _| StandardNormal.sample(&mut rng)) };

    let basis = QR::new(gauss(d, d)).q();
    let t = gauss(d, 1);
    // eigenvalues inside [0.1, 10], condition number at most 100
    let eigs = Vector::from_fn(d, |i, _| 10f64.powf((t[(i, 0)] / 2.0).tanh()));
    let q = &basis * Matrix::from_diagonal(&eigs) * basis.transpose();
    let q = 0.5 * (&q + q.transpose());

    let mut g = gauss(m, d);
    for mut row in g.row_iter_mut() {
        let n = row.norm();
        row /= n;
    }
    let truth = gauss(d, nf) / (nf as f64).sqrt();
    let features: Vec<Vector> = (0..o.n_samples).map(|_| gauss(nf, 1).column(0).into_owned()).collect();
    let noise = gauss(d, o.n_samples) * o.noise;
    let w0 = &truth + gauss(d, nf) * o.init_noise;
    drop(gauss);
    let h0 = Vector::from_fn(m, |_, _| rng.random_range(0.5..1.5));

    let spec = ParametricQp::unconstrained(q, -Matrix::identity(d, d), Vector::zeros(d)).with_inequalities(
        g,
        h0,
        Matrix::zeros(m, d),
    );
    let description = json!({ "qp": &spec, "options": {
        "seed": o.seed, "n_samples": o.n_samples, "dim_x": nf, "dim_y": d,
        "m_ineq": m, "noise": o.noise, "init_noise": o.init_noise,
    }});
    let problem = make_parametric_qp(spec)?;

    let dataset = features
        .into_iter()
        .enumerate()
        .map(|(i, f)| Sample {
            target: &truth * &f + noise.column(i),
            feature: f,
        })
        .collect::<Vec<_>>();

    let model = Model::Linear {
        n_features: nf,
        out_dim: d,
    };
    let mut theta0 = Vector::zeros(model.n_params());
    for i in 0..d {
        for j in 0..nf {
            theta0[i * nf + j] = w0[(i, j)];
        }
    }
    Ok(TaskSpec {
        kind: TaskKind::Dfl,
        batch_size: dataset.len(),
        dataset,
        model,
        loss: Loss::Linear,
        lower: LowerLevel::Shared(Box::new(problem)),
        theta0,
        description,
    })
}
