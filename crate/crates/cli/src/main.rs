//! `ffo`: oracle comparison, training runs and timing sweeps.
//!
//! Exit codes: 0 success, 1 the run completed but its check failed (errors
//! above the bound, loss did not decrease), 2 solver or I/O failure, 3
//! degenerate active set under `--strict`.

use std::fs::File;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ffo_core::experiments::{bench, compare, problem_info, write_bench_csv, BenchOptions, CompareOptions};
use ffo_core::problem::{make_parametric_qp, preset, BilevelProblem, ParametricQp, Preset};
use ffo_core::trainer::{dfl_task, sudoku_task_with, train_with, OracleKind, SudokuOptions, TrainConfig};
use ffo_core::{Error, Vector};
use log::{error, info};

const EXIT_CHECK_FAILED: u8 = 1;
const EXIT_FAILURE: u8 = 2;
const EXIT_DEGENERATE: u8 = 3;

#[derive(Parser)]
#[command(name = "ffo", version, about = "First-order hypergradient oracles: compare, train, bench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run all oracles at one point and report pairwise errors as JSON.
    Compare(CompareArgs),
    /// Train on a benchmark task and write the per-step trace as CSV.
    Train(TrainArgs),
    /// Time forward and backward passes over random QPs, CSV output.
    Bench(BenchArgs),
    /// Describe a problem and its solution at a point, JSON output.
    PresetInfo(ProblemArgs),
}

#[derive(Args)]
struct ProblemArgs {
    /// wall, circle or random-qp.
    #[arg(long, default_value = "wall")]
    preset: String,
    /// JSON file holding a parametric QP; overrides --preset.
    #[arg(long)]
    problem: Option<PathBuf>,
    /// Wall slope.
    #[arg(long, default_value_t = 100.0)]
    a: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    d: usize,
    #[arg(long, default_value_t = 4)]
    m: usize,
    /// Equality constraints of random-qp.
    #[arg(long, default_value_t = 0)]
    p: usize,
    /// Evaluation point; one value is broadcast to every coordinate.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "0.0")]
    x: Vec<f64>,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    problem: ProblemArgs,
    /// Upstream gradient; defaults to the normalized all-ones vector.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    c: Option<Vec<f64>>,
    #[arg(long, default_value_t = 1e-4)]
    delta: f64,
    /// Pairwise error bound; defaults to 20 delta (1 + |c|).
    #[arg(long)]
    bound: Option<f64>,
    /// Step of the finite differences over x.
    #[arg(long, default_value_t = 1e-5)]
    fd_step: f64,
    /// Exit 3 on a degenerate active set instead of skipping the exact oracles.
    #[arg(long)]
    strict: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Task {
    Dfl,
    Sudoku,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(value_enum)]
    task: Task,
    #[arg(long, default_value_t = 100)]
    steps: usize,
    #[arg(long, default_value = "ffo")]
    oracle: String,
    /// Defaults to 0.05 for dfl and 0.01 for sudoku.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, default_value_t = 1e-6)]
    eps: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Dataset size; defaults to 20 for dfl and 10 for sudoku.
    #[arg(long)]
    n_samples: Option<usize>,
    /// Sudoku side length.
    #[arg(long, default_value_t = 4)]
    n: usize,
    /// Sudoku objective regularization.
    #[arg(long, default_value_t = 1e-2)]
    epsilon_reg: f64,
    /// dfl decision dimension.
    #[arg(long, default_value_t = 5)]
    dim_y: usize,
    /// dfl feature dimension.
    #[arg(long, default_value_t = 5)]
    dim_x: usize,
    /// dfl inequality count.
    #[arg(long, default_value_t = 3)]
    m_ineq: usize,
    /// Smoothing radius of the smoothed oracle.
    #[arg(long, default_value_t = 1e-2)]
    rho: f64,
    /// Samples per smoothed estimate.
    #[arg(long, default_value_t = 16)]
    smoothing_samples: usize,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "10,50,200")]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    delta: f64,
    #[arg(long)]
    output: Option<PathBuf>,
}

/// Failure of a subcommand, carrying its exit code.
struct Fail(u8, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::DegenerateActiveSet(_) => EXIT_DEGENERATE,
            _ => EXIT_FAILURE,
        };
        Fail(code, e.to_string())
    }
}

impl From<io::Error> for Fail {
    fn from(e: io::Error) -> Self {
        Fail(EXIT_FAILURE, e.to_string())
    }
}

/// Opened before any work so an unwritable path fails fast.
fn open_output(path: &Option<PathBuf>) -> Result<Box<dyn Write>, Fail> {
    match path {
        Some(p) => {
            let f = File::create(p).map_err(|e| Fail(EXIT_FAILURE, format!("{}: {e}", p.display())))?;
            Ok(Box::new(io::BufWriter::new(f)))
        }
        None => Ok(Box::new(io::stdout().lock())),
    }
}

fn load_problem(args: &ProblemArgs) -> Result<(String, Box<dyn BilevelProblem>), Fail> {
    if let Some(path) = &args.problem {
        let text = std::fs::read_to_string(path).map_err(|e| Fail(EXIT_FAILURE, format!("{}: {e}", path.display())))?;
        let spec: ParametricQp = serde_json::from_str(&text).map_err(|e| Fail(EXIT_FAILURE, e.to_string()))?;
        return Ok((path.display().to_string(), Box::new(make_parametric_qp(spec)?)));
    }
    let which = Preset::by_name(&args.preset, args.a, args.seed, args.d, args.m, args.p)?;
    Ok((which.name().to_string(), preset(&which)?))
}

fn broadcast(values: &[f64], n: usize, what: &str) -> Result<Vector, Fail> {
    match values.len() {
        1 => Ok(Vector::from_element(n, values[0])),
        k if k == n => Ok(Vector::from_row_slice(values)),
        k => Err(Fail(EXIT_FAILURE, format!("--{what} has {k} values, expected 1 or {n}"))),
    }
}

fn cmd_compare(args: &CompareArgs) -> Result<u8, Fail> {
    let mut out = open_output(&args.problem.output)?;
    let (name, problem) = load_problem(&args.problem)?;
    let x = broadcast(&args.problem.x, problem.dim_x(), "x")?;
    let d = problem.dim_y();
    let c = match &args.c {
        Some(c) => broadcast(c, d, "c")?,
        None => Vector::from_element(d, 1.0 / (d as f64).sqrt()),
    };
    let opts = CompareOptions {
        delta: args.delta,
        fd_step: args.fd_step,
        bound: args.bound,
        strict: args.strict,
        ..CompareOptions::default()
    };
    let report = compare(problem.as_ref(), &x, &c, &opts)?;
    info!("compare {name}: max pairwise error {:.3e}, bound {:.3e}", report.max_error(), report.bound);
    writeln!(out, "{}", report.to_json()?)?;
    out.flush()?;
    Ok(if report.passed() { 0 } else { EXIT_CHECK_FAILED })
}

fn cmd_train(args: &TrainArgs) -> Result<u8, Fail> {
    let oracle: OracleKind = args.oracle.parse()?;
    let mut out = open_output(&args.output)?;
    let (task, lr) = match args.task {
        Task::Dfl => (
            dfl_task(args.seed, args.n_samples.unwrap_or(20), args.dim_x, args.dim_y, args.m_ineq)?,
            args.lr.unwrap_or(0.05),
        ),
        Task::Sudoku => {
            let opts = SudokuOptions::new(args.n, args.n_samples.unwrap_or(10), args.epsilon_reg, args.seed);
            (sudoku_task_with(&opts)?, args.lr.unwrap_or(0.01))
        }
    };
    let mut cfg = TrainConfig::new(oracle, args.steps, lr, args.eps, args.seed);
    cfg.smoothing = (args.rho, args.smoothing_samples);
    let trace = match train_with(&task, &cfg) {
        Ok(t) => t,
        Err(abort) => {
            abort.partial.write_csv(&mut out)?;
            return Err(Fail(EXIT_FAILURE, abort.to_string()));
        }
    };
    trace.write_csv(&mut out)?;
    out.flush()?;
    let (initial, fin) = (trace.initial_loss().unwrap_or(f64::NAN), trace.final_loss.unwrap_or(f64::NAN));
    info!(
        "train {}: loss {initial:.6} -> {fin:.6}, {} uncertified oracle calls",
        oracle.as_str(),
        trace.uncertified
    );
    Ok(if fin < initial { 0 } else { EXIT_CHECK_FAILED })
}

fn cmd_bench(args: &BenchArgs) -> Result<u8, Fail> {
    let mut opts = BenchOptions::new(args.sizes.clone(), args.seed);
    opts.reps = args.reps;
    opts.delta = args.delta;
    opts.validate()?;
    let out = open_output(&args.output)?;
    let rows = bench(&opts)?;
    for r in &rows {
        info!(
            "size {}: forward {:.3e}s, ffo {:.3e}s, exact {:.3e}s",
            r.size, r.forward_s, r.ffo_backward_s, r.exact_backward_s
        );
    }
    write_bench_csv(&rows, out)?;
    Ok(0)
}

fn cmd_preset_info(args: &ProblemArgs) -> Result<u8, Fail> {
    let mut out = open_output(&args.output)?;
    let (name, problem) = load_problem(args)?;
    let x = broadcast(&args.x, problem.dim_x(), "x")?;
    let mut info = problem_info(problem.as_ref(), &x)?;
    info["name"] = serde_json::Value::String(name);
    let text = serde_json::to_string_pretty(&info).map_err(|e| Fail(EXIT_FAILURE, e.to_string()))?;
    writeln!(out, "{text}")?;
    out.flush()?;
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FFO_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Compare(a) => cmd_compare(a),
        Command::Train(a) => cmd_train(a),
        Command::Bench(a) => cmd_bench(a),
        Command::PresetInfo(a) => cmd_preset_info(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(Fail(code, msg)) => {
            error!("{msg}");
            eprintln!("ffo: {msg}");
            ExitCode::from(code)
        }
    }
}
