//! Reports behind the command-line tool: side-by-side oracle comparison at a
//! point, and forward/backward timing sweeps over random QPs.
//!
//! Reports serialize through `serde_json::Value`, whose maps are ordered, so
//! JSON output has sorted keys.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use serde::Serialize;

use crate::active_set::{build_ghost_with, identify_active, tol_act_for, GhostOptions};
use crate::error::{check_dim, Error, Result};
use crate::hypergradient::{exact_hypergradient_at, ffo_hypergradient_at, projection_jacobian};
use crate::problem::serde_matrix::vector;
use crate::problem::{random_qp_with, BilevelProblem, RandomQpOptions};
use crate::solver::{solve_lower, SolverConfig};
use crate::Vector;

#[derive(Debug, Clone)]
pub struct CompareOptions {
    /// Perturbation size handed to the first-order oracle.
    pub delta: f64,
    /// Step of the central differences over `x`.
    pub fd_step: f64,
    /// Pairwise error bound; `20 delta (1 + |c|)` when absent.
    pub bound: Option<f64>,
    /// Fail on a degenerate active set instead of dropping the oracles that
    /// need strict complementarity.
    pub strict: bool,
    pub solver: SolverConfig,
}

impl Default for CompareOptions {
    fn default() -> Self {
        CompareOptions {
            delta: 1e-4,
            fd_step: 1e-5,
            bound: None,
            strict: false,
            solver: SolverConfig::oracle(),
        }
    }
}

fn opt_vector<S: serde::Serializer>(v: &Option<Vector>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(v) => vector::serialize(v, s),
        None => s.serialize_none(),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareReport {
    #[serde(with = "vector")]
    pub x: Vector,
    #[serde(with = "vector")]
    pub c: Vector,
    pub delta: f64,
    pub bound: f64,
    #[serde(with = "vector")]
    pub grad_ffo: Vector,
    #[serde(serialize_with = "opt_vector")]
    pub grad_exact: Option<Vector>,
    #[serde(serialize_with = "opt_vector")]
    pub grad_proj: Option<Vector>,
    #[serde(with = "vector")]
    pub grad_fd: Vector,
    /// Pairwise 2-norm distances, keyed `a-b`.
    pub errors: BTreeMap<String, f64>,
    /// Seconds, keyed by stage.
    pub timings: BTreeMap<String, f64>,
    pub active: Vec<usize>,
    pub degenerate: bool,
    pub certified: bool,
}

impl CompareReport {
    pub fn max_error(&self) -> f64 {
        self.errors.values().copied().fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.errors.values().all(|&e| e <= self.bound)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&serde_json::to_value(self)?)?)
    }
}

/// `direct + d(c^T y*)/dx` by central differences of the solved problem.
pub fn finite_difference_hypergradient(
    problem: &dyn BilevelProblem,
    x: &Vector,
    c: &Vector,
    direct: &Vector,
    step: f64,
    cfg: &SolverConfig,
) -> Result<Vector> {
    let mut g = direct.clone();
    for j in 0..x.len() {
        let mut xp = x.clone();
        xp[j] += step;
        let mut xm = x.clone();
        xm[j] -= step;
        let fp = c.dot(&solve_lower(problem, &xp, cfg)?.y);
        let fm = c.dot(&solve_lower(problem, &xm, cfg)?.y);
        g[j] += (fp - fm) / (2.0 * step);
    }
    Ok(g)
}

/// Runs the first-order, exact, projection-form and finite-difference
/// oracles at `x` with no direct term.
pub fn compare(problem: &dyn BilevelProblem, x: &Vector, c: &Vector, opts: &CompareOptions) -> Result<CompareReport> {
    check_dim("x", problem.dim_x(), x.len())?;
    check_dim("c", problem.dim_y(), c.len())?;
    let direct = Vector::zeros(x.len());
    let mut timings = BTreeMap::new();

    let t = Instant::now();
    let sol = solve_lower(problem, x, &opts.solver)?;
    let active = identify_active(problem, x, &sol, tol_act_for(opts.solver.tol))?;
    timings.insert("forward".to_string(), t.elapsed().as_secs_f64());
    if active.degenerate && opts.strict {
        return Err(Error::DegenerateActiveSet(active.ambiguous.clone()));
    }

    let t = Instant::now();
    let ffo = ffo_hypergradient_at(problem, x, &sol, c, &direct, opts.delta, &opts.solver)?;
    timings.insert("ffo".to_string(), t.elapsed().as_secs_f64());

    let (grad_exact, grad_proj) = if active.degenerate {
        (None, None)
    } else {
        let t = Instant::now();
        let exact = exact_hypergradient_at(problem, x, &sol, &active, c, &direct)?;
        timings.insert("exact".to_string(), t.elapsed().as_secs_f64());

        let t = Instant::now();
        let ghost = build_ghost_with(problem, x, &sol, &active, GhostOptions::default())?;
        let jac = projection_jacobian(&ghost, &ghost.g_hess_yy(x, &sol.y), &ghost.g_hess_yx(x, &sol.y))?;
        let proj = &direct + jac.tr_mul(c);
        timings.insert("proj".to_string(), t.elapsed().as_secs_f64());
        (Some(exact), Some(proj))
    };

    let t = Instant::now();
    let grad_fd = finite_difference_hypergradient(problem, x, c, &direct, opts.fd_step, &opts.solver)?;
    timings.insert("fd".to_string(), t.elapsed().as_secs_f64());

    let mut named: Vec<(&str, &Vector)> = vec![("ffo", &ffo.grad)];
    if let (Some(e), Some(p)) = (&grad_exact, &grad_proj) {
        named.push(("exact", e));
        named.push(("proj", p));
    }
    named.push(("fd", &grad_fd));
    let mut errors = BTreeMap::new();
    for (i, (a, ga)) in named.iter().enumerate() {
        for (b, gb) in &named[i + 1..] {
            errors.insert(format!("{a}-{b}"), (*ga - *gb).norm());
        }
    }

    Ok(CompareReport {
        x: x.clone(),
        c: c.clone(),
        delta: ffo.delta,
        bound: opts.bound.unwrap_or(20.0 * ffo.delta * (1.0 + c.norm())),
        grad_ffo: ffo.grad,
        grad_exact,
        grad_proj,
        grad_fd,
        errors,
        timings,
        active: active.indices.clone(),
        degenerate: active.degenerate,
        certified: ffo.certified,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub size: usize,
    pub forward_s: f64,
    pub ffo_backward_s: f64,
    pub exact_backward_s: f64,
}

pub const BENCH_CSV_HEADER: &str = "size,forward_s,ffo_backward_s,exact_backward_s";

#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub sizes: Vec<usize>,
    /// Timed repetitions per size, after one discarded warm-up.
    pub reps: usize,
    pub seed: u64,
    pub delta: f64,
}

impl BenchOptions {
    pub fn new(sizes: Vec<usize>, seed: u64) -> Self {
        BenchOptions {
            sizes,
            reps: 5,
            seed,
            delta: 1e-4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sizes.is_empty() || self.sizes.windows(2).any(|w| w[0] >= w[1]) || self.sizes[0] == 0 {
            return Err(Error::InvalidArgument(format!(
                "sizes must be positive and strictly increasing, got {:?}",
                self.sizes
            )));
        }
        if self.reps < 5 {
            return Err(Error::InvalidArgument(format!("need at least 5 repetitions, got {}", self.reps)));
        }
        Ok(())
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Problem used for a bench size: `m = d` inequalities, about a tenth of
/// them active.
pub fn bench_problem(size: usize, seed: u64) -> Result<crate::problem::QpProblem> {
    let mut o = RandomQpOptions::new(seed, size, size, 0);
    o.active = Some((size / 10).max(1));
    random_qp_with(&o)
}

/// Median timings per size. Backward times exclude the shared forward solve
/// and include active-set identification.
pub fn bench(opts: &BenchOptions) -> Result<Vec<BenchRow>> {
    opts.validate()?;
    let cfg = SolverConfig::oracle();
    let mut rows = Vec::with_capacity(opts.sizes.len());
    for &size in &opts.sizes {
        let problem = bench_problem(size, opts.seed)?;
        let x = Vector::zeros(size);
        let c = Vector::from_element(size, 1.0 / (size as f64).sqrt());
        let direct = Vector::zeros(size);
        let (mut fw, mut ffo, mut ex) = (Vec::new(), Vec::new(), Vec::new());
        for rep in 0..=opts.reps {
            let t = Instant::now();
            let sol = solve_lower(&problem, &x, &cfg)?;
            let forward = t.elapsed().as_secs_f64();

            let t = Instant::now();
            ffo_hypergradient_at(&problem, &x, &sol, &c, &direct, opts.delta, &cfg)?;
            let ffo_s = t.elapsed().as_secs_f64();

            let t = Instant::now();
            let act = identify_active(&problem, &x, &sol, tol_act_for(cfg.tol))?;
            exact_hypergradient_at(&problem, &x, &sol, &act, &c, &direct)?;
            let exact_s = t.elapsed().as_secs_f64();

            if rep > 0 {
                fw.push(forward);
                ffo.push(ffo_s);
                ex.push(exact_s);
            }
        }
        rows.push(BenchRow {
            size,
            forward_s: median(fw),
            ffo_backward_s: median(ffo),
            exact_backward_s: median(ex),
        });
    }
    Ok(rows)
}

pub fn write_bench_csv<W: Write>(rows: &[BenchRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record(BENCH_CSV_HEADER.split(','))?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Dimensions, solution and active set of a problem at `x`.
pub fn problem_info(problem: &dyn BilevelProblem, x: &Vector) -> Result<serde_json::Value> {
    check_dim("x", problem.dim_x(), x.len())?;
    let cfg = SolverConfig::oracle();
    let sol = solve_lower(problem, x, &cfg)?;
    let active = identify_active(problem, x, &sol, tol_act_for(cfg.tol))?;
    Ok(serde_json::json!({
        "dim_y": problem.dim_y(),
        "dim_x": problem.dim_x(),
        "n_ineq": problem.n_ineq(),
        "n_eq": problem.n_eq(),
        "mu_g": problem.mu_g(),
        "x": x.as_slice(),
        "solution": serde_json::to_value(&sol)?,
        "active": serde_json::to_value(&active)?,
    }))
}
