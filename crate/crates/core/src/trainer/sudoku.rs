//! Learning Sudoku rules as the equality constraints of a regularized LP.
//!
//! Board cells are one-hot encoded, `y[(r n + c) n + k] = 1` when cell
//! `(r, c)` holds digit `k + 1`. The lower level is
//! `min eps/2 |y|^2 - p^T y  s.t.  A(theta) (y - 1/n) = 0, y >= 0`
//! with `p` the encoded clues; training fits `A(theta)` so that `y*` matches
//! the completed board.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::json;

use super::{LowerLevel, Loss, Model, Sample, TaskKind, TaskSpec};
use crate::error::{Error, Result};
use crate::problem::{make_constraint_param_lp, BilevelProblem, ConstraintParamLp};
use crate::{Matrix, Vector};

/// Row-major board, `0` for an empty cell.
pub type Grid = Vec<u8>;

fn box_side(n: usize) -> Result<usize> {
    let b = (n as f64).sqrt().round() as usize;
    if n < 4 || b * b != n {
        return Err(Error::InvalidArgument(format!(
            "sudoku side must be a perfect square >= 4, got {n}"
        )));
    }
    Ok(b)
}

pub fn one_hot(grid: &[u8], n: usize) -> Vector {
    let mut v = Vector::zeros(n * n * n);
    for (cell, &digit) in grid.iter().enumerate() {
        if digit > 0 {
            v[cell * n + digit as usize - 1] = 1.0;
        }
    }
    v
}

/// The `4 n^2` rules (each cell, and each digit per row, column and box,
/// sums to one) as rows of a `4 n^2 x n^3` matrix. Rows are dependent.
pub fn sudoku_constraints(n: usize) -> Result<Matrix> {
    let b = box_side(n)?;
    let idx = |r: usize, c: usize, k: usize| (r * n + c) * n + k;
    let mut a = Matrix::zeros(4 * n * n, n * n * n);
    for r in 0..n {
        for c in 0..n {
            for k in 0..n {
                a[(r * n + c, idx(r, c, k))] = 1.0;
                a[(n * n + r * n + k, idx(r, c, k))] = 1.0;
                a[(2 * n * n + c * n + k, idx(r, c, k))] = 1.0;
                let bx = (r / b) * b + c / b;
                a[(3 * n * n + bx * n + k, idx(r, c, k))] = 1.0;
            }
        }
    }
    Ok(a)
}

fn allowed(grid: &[u8], n: usize, b: usize, cell: usize, digit: u8) -> bool {
    let (r, c) = (cell / n, cell % n);
    let (br, bc) = (r / b * b, c / b * b);
    (0..n).all(|i| {
        grid[r * n + i] != digit && grid[i * n + c] != digit && grid[(br + i / b) * n + bc + i % b] != digit
    })
}

/// Number of completions of `grid`, counting stops at `limit`.
pub fn count_solutions(grid: &[u8], n: usize, limit: usize) -> usize {
    let b = match box_side(n) {
        Ok(b) => b,
        Err(_) => return 0,
    };
    let mut work = grid.to_vec();
    let mut count = 0;
    search(&mut work, n, b, limit, &mut count);
    count
}

fn search(grid: &mut [u8], n: usize, b: usize, limit: usize, count: &mut usize) {
    // branch on the empty cell with the fewest candidates
    let mut best: Option<(usize, Vec<u8>)> = None;
    for cell in 0..n * n {
        if grid[cell] != 0 {
            continue;
        }
        let cands: Vec<u8> = (1..=n as u8).filter(|&dg| allowed(grid, n, b, cell, dg)).collect();
        if cands.is_empty() {
            return;
        }
        if best.as_ref().is_none_or(|(_, bc)| cands.len() < bc.len()) {
            best = Some((cell, cands));
        }
    }
    let Some((cell, cands)) = best else {
        *count += 1;
        return;
    };
    for dg in cands {
        grid[cell] = dg;
        search(grid, n, b, limit, count);
        if *count >= limit {
            break;
        }
    }
    grid[cell] = 0;
}

/// A completed board from a relabelled, row/column-shuffled pattern grid,
/// and a puzzle obtained by removing clues while the completion stays unique.
pub fn generate_puzzle(n: usize, rng: &mut impl Rng) -> Result<(Grid, Grid)> {
    let b = box_side(n)?;
    let mut digits: Vec<u8> = (1..=n as u8).collect();
    digits.shuffle(rng);
    let perm_axis = |rng: &mut dyn rand::RngCore| -> Vec<usize> {
        let mut bands: Vec<usize> = (0..b).collect();
        bands.shuffle(rng);
        let mut out = Vec::with_capacity(n);
        for band in bands {
            let mut inner: Vec<usize> = (0..b).collect();
            inner.shuffle(rng);
            out.extend(inner.into_iter().map(|i| band * b + i));
        }
        out
    };
    let rows = perm_axis(rng);
    let cols = perm_axis(rng);
    let transpose = rng.random_bool(0.5);
    let mut solution = vec![0u8; n * n];
    for r in 0..n {
        for c in 0..n {
            let (rr, cc) = (rows[r], cols[c]);
            let (rr, cc) = if transpose { (cc, rr) } else { (rr, cc) };
            let pattern = ((rr % b) * b + rr / b + cc) % n;
            solution[r * n + c] = digits[pattern];
        }
    }

    let mut puzzle = solution.clone();
    let mut order: Vec<usize> = (0..n * n).collect();
    order.shuffle(rng);
    for cell in order {
        let keep = puzzle[cell];
        puzzle[cell] = 0;
        if count_solutions(&puzzle, n, 2) != 1 {
            puzzle[cell] = keep;
        }
    }
    Ok((puzzle, solution))
}

#[derive(Debug, Clone)]
pub struct SudokuOptions {
    pub n: usize,
    pub n_samples: usize,
    pub epsilon_reg: f64,
    pub seed: u64,
    /// Rows of the learned constraint matrix.
    pub n_rows: usize,
    /// Entry scale of the random initial matrix.
    pub init_scale: f64,
}

impl SudokuOptions {
    pub fn new(n: usize, n_samples: usize, epsilon_reg: f64, seed: u64) -> Self {
        SudokuOptions {
            n,
            n_samples,
            epsilon_reg,
            seed,
            n_rows: n * n * n / 2,
            init_scale: 1.0,
        }
    }
}

pub fn sudoku_task(n: usize, n_samples: usize, epsilon_reg: f64, seed: u64) -> Result<TaskSpec> {
    sudoku_task_with(&SudokuOptions::new(n, n_samples, epsilon_reg, seed))
}

pub fn sudoku_task_with(o: &SudokuOptions) -> Result<TaskSpec> {
    box_side(o.n)?;
    if o.n_samples == 0 || o.n_rows == 0 {
        return Err(Error::InvalidArgument(
            "sudoku_task needs samples and constraint rows".into(),
        ));
    }
    let (n, d) = (o.n, o.n * o.n * o.n);
    let mut rng = ChaCha8Rng::seed_from_u64(o.seed);
    let mut dataset = Vec::with_capacity(o.n_samples);
    let mut puzzles = Vec::with_capacity(o.n_samples);
    for _ in 0..o.n_samples {
        let (puzzle, solution) = generate_puzzle(n, &mut rng)?;
        dataset.push(Sample {
            feature: one_hot(&puzzle, n),
            target: one_hot(&solution, n),
        });
        puzzles.push(puzzle);
    }
    let scale = o.init_scale / (d as f64).sqrt();
    let a0 = Matrix::from_fn(o.n_rows, d, |_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        scale * z
    });
    let anchor = Vector::from_element(d, 1.0 / n as f64);
    let problems = dataset
        .iter()
        .map(|s| {
            let spec = ConstraintParamLp::new(o.epsilon_reg, -&s.feature, &a0, anchor.clone(), true);
            make_constraint_param_lp(spec).map(|p| Box::new(p) as Box<dyn BilevelProblem>)
        })
        .collect::<Result<Vec<_>>>()?;
    let description = json!({
        "n": n, "n_samples": o.n_samples, "epsilon_reg": o.epsilon_reg, "seed": o.seed,
        "n_rows": o.n_rows, "init_scale": o.init_scale, "puzzles": puzzles,
        "a0": a0.as_slice(),
    });
    Ok(TaskSpec {
        kind: TaskKind::Sudoku,
        batch_size: dataset.len(),
        dataset,
        model: Model::Identity { dim: o.n_rows * d },
        loss: Loss::SquaredError,
        lower: LowerLevel::PerInstance(problems),
        theta0: Vector::zeros(o.n_rows * d),
        description,
    })
}
