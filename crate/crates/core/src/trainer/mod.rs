//! Gradient descent on the parameters of an affine model whose outputs feed
//! the lower-level problem.
//!
//! The outer loss depends on the parameters only through `y*`, so each
//! instance needs just `c = dloss/dy*` and a hypergradient oracle; the direct
//! term is identically zero. Forward solves and backward oracle calls fan out
//! over the batch; the reduction to the parameter gradient runs in index
//! order so traces are reproducible.

mod dfl;
mod sudoku;

use std::io::Write;
use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use dfl::{dfl_task, dfl_task_with, DflOptions};
pub use sudoku::{
    count_solutions, generate_puzzle, one_hot, sudoku_constraints, sudoku_task, sudoku_task_with, Grid,
    SudokuOptions,
};

use crate::active_set::{build_ghost_with, identify_active, tol_act_for, ActiveSet, GhostOptions};
use crate::error::{check_dim, Error, Result};
use crate::hypergradient::{exact_hypergradient_at, ffo_hypergradient_at};
use crate::parallel::{map_indexed, Execution};
use crate::problem::serde_matrix::vector;
use crate::problem::BilevelProblem;
use crate::smoothed::{smoothed_hypergradient_with, SmoothedConfig};
use crate::solver::{solve_lower, PrimalDualSolution, SolverConfig};
use crate::Vector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Dfl,
    Sudoku,
    Custom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OracleKind {
    Ffo,
    Exact,
    Smoothed,
}

impl OracleKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OracleKind::Ffo => "ffo",
            OracleKind::Exact => "exact",
            OracleKind::Smoothed => "smoothed",
        }
    }
}

impl std::str::FromStr for OracleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ffo" => Ok(OracleKind::Ffo),
            "exact" => Ok(OracleKind::Exact),
            "smoothed" => Ok(OracleKind::Smoothed),
            other => Err(Error::InvalidArgument(format!("unknown oracle `{other}`"))),
        }
    }
}

/// Affine map from parameters `theta` and an instance feature to the
/// lower-level parameter `x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Model {
    /// `x = W f + b`; `theta` holds `W` row-major followed by `b`.
    Linear { n_features: usize, out_dim: usize },
    /// `x = theta`, shared by every instance.
    Identity { dim: usize },
}

impl Model {
    pub fn n_params(&self) -> usize {
        match *self {
            Model::Linear { n_features, out_dim } => out_dim * (n_features + 1),
            Model::Identity { dim } => dim,
        }
    }

    pub fn out_dim(&self) -> usize {
        match *self {
            Model::Linear { out_dim, .. } => out_dim,
            Model::Identity { dim } => dim,
        }
    }

    pub fn forward(&self, theta: &Vector, feature: &Vector) -> Vector {
        match *self {
            Model::Linear { n_features, out_dim } => {
                let w = theta.rows(0, out_dim * n_features);
                Vector::from_fn(out_dim, |i, _| {
                    let row = w.rows(i * n_features, n_features);
                    row.dot(feature) + theta[out_dim * n_features + i]
                })
            }
            Model::Identity { .. } => theta.clone(),
        }
    }

    /// `(dx/dtheta)^T grad_x`.
    pub fn pullback(&self, feature: &Vector, grad_x: &Vector) -> Vector {
        match *self {
            Model::Linear { n_features, out_dim } => {
                let mut g = Vector::zeros(self.n_params());
                for i in 0..out_dim {
                    for j in 0..n_features {
                        g[i * n_features + j] = grad_x[i] * feature[j];
                    }
                    g[out_dim * n_features + i] = grad_x[i];
                }
                g
            }
            Model::Identity { .. } => grad_x.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    /// `target^T y`
    Linear,
    /// `|y - target|^2`
    SquaredError,
}

impl Loss {
    /// `(dloss/dy, loss)`.
    pub fn eval(self, y: &Vector, target: &Vector) -> (Vector, f64) {
        match self {
            Loss::Linear => (target.clone(), target.dot(y)),
            Loss::SquaredError => {
                let r = y - target;
                (2.0 * &r, r.norm_squared())
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sample {
    #[serde(with = "vector")]
    pub feature: Vector,
    #[serde(with = "vector")]
    pub target: Vector,
}

/// Lower-level problem(s) of a task.
pub enum LowerLevel {
    Shared(Box<dyn BilevelProblem>),
    PerInstance(Vec<Box<dyn BilevelProblem>>),
}

impl LowerLevel {
    pub fn get(&self, i: usize) -> &dyn BilevelProblem {
        match self {
            LowerLevel::Shared(p) => p.as_ref(),
            LowerLevel::PerInstance(ps) => ps[i].as_ref(),
        }
    }
}

pub struct TaskSpec {
    pub kind: TaskKind,
    pub dataset: Vec<Sample>,
    pub model: Model,
    pub loss: Loss,
    pub batch_size: usize,
    pub lower: LowerLevel,
    pub theta0: Vector,
    /// Serializable record of how the lower-level problems were built.
    pub description: serde_json::Value,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dataset.is_empty() {
            return Err(Error::InvalidArgument("task dataset is empty".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        check_dim("theta0", self.model.n_params(), self.theta0.len())?;
        if let LowerLevel::PerInstance(ps) = &self.lower {
            check_dim("per-instance problems", self.dataset.len(), ps.len())?;
        }
        for i in 0..self.dataset.len() {
            let p = self.lower.get(i);
            check_dim("model output", p.dim_x(), self.model.out_dim())?;
            check_dim("target", p.dim_y(), self.dataset[i].target.len())?;
        }
        Ok(())
    }

    /// Canonical JSON of everything that defines the task.
    pub fn to_json_bytes(&self) -> Result<Vec<u8>> {
        #[derive(Serialize)]
        struct View<'a> {
            kind: TaskKind,
            dataset: &'a [Sample],
            model: &'a Model,
            loss: Loss,
            batch_size: usize,
            #[serde(with = "vector")]
            theta0: &'a Vector,
            description: &'a serde_json::Value,
        }
        Ok(serde_json::to_vec(&View {
            kind: self.kind,
            dataset: &self.dataset,
            model: &self.model,
            loss: self.loss,
            batch_size: self.batch_size,
            theta0: &self.theta0,
            description: &self.description,
        })?)
    }

    /// Lower-level solution and loss for instance `i` at `theta`.
    pub fn forward(&self, theta: &Vector, i: usize, cfg: &SolverConfig) -> Result<(Vector, PrimalDualSolution, f64)> {
        let s = &self.dataset[i];
        let x = self.model.forward(theta, &s.feature);
        let sol = solve_lower(self.lower.get(i), &x, cfg)?;
        let (_, loss) = self.loss.eval(&sol.y, &s.target);
        Ok((x, sol, loss))
    }

    /// Mean loss over the whole dataset.
    pub fn mean_loss(&self, theta: &Vector, cfg: &SolverConfig, exec: Execution) -> Result<f64> {
        let losses = map_indexed(self.dataset.len(), exec, |i| self.forward(theta, i, cfg).map(|r| r.2));
        let mut sum = 0.0;
        for l in losses {
            sum += l?;
        }
        Ok(sum / self.dataset.len() as f64)
    }
}

impl std::fmt::Debug for TaskSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TaskSpec")
            .field("kind", &self.kind)
            .field("n", &self.dataset.len())
            .field("model", &self.model)
            .field("loss", &self.loss)
            .field("batch_size", &self.batch_size)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub oracle: OracleKind,
    pub steps: usize,
    pub lr: f64,
    /// Target accuracy of the first-order oracle.
    pub eps: f64,
    pub seed: u64,
    pub solver: SolverConfig,
    pub exec: Execution,
    /// Smoothing radius and sample count for [`OracleKind::Smoothed`].
    pub smoothing: (f64, usize),
    /// Keep every step's parameter gradient in the trace.
    pub record_grads: bool,
}

impl TrainConfig {
    pub fn new(oracle: OracleKind, steps: usize, lr: f64, eps: f64, seed: u64) -> Self {
        TrainConfig {
            oracle,
            steps,
            lr,
            eps,
            seed,
            solver: SolverConfig::training(),
            exec: Execution::default(),
            smoothing: (1e-2, 16),
            record_grads: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    /// Mean batch loss before the update.
    pub loss: f64,
    pub grad_norm: f64,
    pub forward_s: f64,
    pub backward_s: f64,
    pub oracle: OracleKind,
}

#[derive(Debug, Clone)]
pub struct TrainTrace {
    pub records: Vec<StepRecord>,
    pub final_theta: Vector,
    /// Mean dataset loss at `final_theta`; absent when training aborted.
    pub final_loss: Option<f64>,
    /// Per-step parameter gradients when requested.
    pub grads: Vec<Vector>,
    /// Instances whose oracle reported `certified = false`.
    pub uncertified: usize,
}

impl TrainTrace {
    pub const CSV_HEADER: &'static str = "step,loss,grad_norm,forward_s,backward_s,oracle";

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        if self.records.is_empty() {
            w.write_record(Self::CSV_HEADER.split(','))?;
        }
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn initial_loss(&self) -> Option<f64> {
        self.records.first().map(|r| r.loss)
    }
}

/// Training stopped early; `partial` holds the steps completed so far.
#[derive(Debug)]
pub struct TrainAbort {
    pub error: Error,
    pub partial: TrainTrace,
}

impl std::fmt::Display for TrainAbort {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "training aborted after {} steps: {}", self.partial.records.len(), self.error)
    }
}

impl std::error::Error for TrainAbort {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

pub fn train(
    task: &TaskSpec,
    oracle: OracleKind,
    steps: usize,
    lr: f64,
    eps: f64,
    seed: u64,
) -> std::result::Result<TrainTrace, TrainAbort> {
    train_with(task, &TrainConfig::new(oracle, steps, lr, eps, seed))
}

/// Hypergradient of instance `i`'s loss with respect to `x`, and whether
/// the oracle certified it.
fn instance_gradient(
    task: &TaskSpec,
    i: usize,
    x: &Vector,
    sol: &PrimalDualSolution,
    c: &Vector,
    cfg: &TrainConfig,
    step: usize,
) -> Result<(Vector, bool)> {
    let problem = task.lower.get(i);
    // losses depend on theta only through y*, so there is no direct term
    let direct = Vector::zeros(x.len());
    match cfg.oracle {
        OracleKind::Ffo => {
            let r = ffo_hypergradient_at(problem, x, sol, c, &direct, cfg.eps, &cfg.solver)?;
            Ok((r.grad, r.certified))
        }
        OracleKind::Exact => {
            let act = identify_active(problem, x, sol, tol_act_for(cfg.solver.tol))?;
            if !act.degenerate {
                return Ok((exact_hypergradient_at(problem, x, sol, &act, c, &direct)?, true));
            }
            // the full KKT system is singular here; differentiate the ghost
            // instead, i.e. the one-sided derivative for the tie-broken set
            let ghost = build_ghost_with(problem, x, sol, &act, GhostOptions::lenient())?;
            let gsol = PrimalDualSolution {
                lambda: Vector::zeros(0),
                nu: Vector::zeros(ghost.n_eq()),
                ..sol.clone()
            };
            let none = ActiveSet {
                indices: Vec::new(),
                margin: f64::INFINITY,
                degenerate: false,
                ambiguous: Vec::new(),
            };
            Ok((exact_hypergradient_at(&ghost, x, &gsol, &none, c, &direct)?, false))
        }
        OracleKind::Smoothed => {
            let (rho, n) = cfg.smoothing;
            let mut sc = SmoothedConfig::new(rho, n, cfg.seed ^ ((step as u64) << 32 | i as u64), problem.n_ineq());
            sc.inner_eps = sc.inner_eps.max(cfg.eps);
            let est = smoothed_hypergradient_with(problem, x, c, &direct, &sc, &cfg.solver, Execution::Sequential)?;
            Ok((est.grad, true))
        }
    }
}

fn batch_indices(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if batch >= n {
        (0..n).collect()
    } else {
        let mut idx = sample(rng, n, batch).into_vec();
        idx.sort_unstable();
        idx
    }
}

pub fn train_with(task: &TaskSpec, cfg: &TrainConfig) -> std::result::Result<TrainTrace, TrainAbort> {
    let mut trace = TrainTrace {
        records: Vec::with_capacity(cfg.steps),
        final_theta: task.theta0.clone(),
        final_loss: None,
        grads: Vec::new(),
        uncertified: 0,
    };
    macro_rules! bail {
        ($e:expr) => {
            return Err(TrainAbort {
                error: $e,
                partial: trace,
            })
        };
    }
    if let Err(e) = task.validate() {
        bail!(e);
    }
    if !(cfg.lr >= 0.0) || cfg.steps == 0 {
        bail!(Error::InvalidArgument(format!(
            "training needs lr >= 0 and steps >= 1 (lr = {}, steps = {})",
            cfg.lr, cfg.steps
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut theta = task.theta0.clone();

    for step in 0..cfg.steps {
        let batch = batch_indices(task.dataset.len(), task.batch_size, &mut rng);

        let t0 = Instant::now();
        let forward = map_indexed(batch.len(), cfg.exec, |b| task.forward(&theta, batch[b], &cfg.solver));
        let forward_s = t0.elapsed().as_secs_f64();
        let mut fwd = Vec::with_capacity(batch.len());
        for r in forward {
            match r {
                Ok(v) => fwd.push(v),
                Err(e) => bail!(e),
            }
        }

        let t0 = Instant::now();
        let backward = map_indexed(batch.len(), cfg.exec, |b| {
            let i = batch[b];
            let (x, sol, _) = &fwd[b];
            let s = &task.dataset[i];
            let (c, _) = task.loss.eval(&sol.y, &s.target);
            instance_gradient(task, i, x, sol, &c, cfg, step)
                .map(|(gx, ok)| (task.model.pullback(&s.feature, &gx), ok))
        });
        let backward_s = t0.elapsed().as_secs_f64();

        let mut grad = Vector::zeros(theta.len());
        let mut loss = 0.0;
        for (b, r) in backward.into_iter().enumerate() {
            match r {
                Ok((g, ok)) => {
                    grad += g;
                    trace.uncertified += (!ok) as usize;
                }
                Err(e) => bail!(e),
            }
            loss += fwd[b].2;
        }
        let n = batch.len() as f64;
        grad /= n;
        loss /= n;

        trace.records.push(StepRecord {
            step,
            loss,
            grad_norm: grad.norm(),
            forward_s,
            backward_s,
            oracle: cfg.oracle,
        });
        theta.axpy(-cfg.lr, &grad, 1.0);
        trace.final_theta = theta.clone();
        if cfg.record_grads {
            trace.grads.push(grad);
        }
    }
    match task.mean_loss(&theta, &cfg.solver, cfg.exec) {
        Ok(l) => trace.final_loss = Some(l),
        Err(e) => bail!(e),
    }
    Ok(trace)
}

#[cfg(test)]
mod tests;
