use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::problem::{make_constraint_param_lp, make_parametric_qp, ConstraintParamLp, ParametricQp};
use crate::{Matrix, Vector};

fn small_dfl() -> TaskSpec {
    dfl_task(0, 20, 5, 5, 3).unwrap()
}

fn same_records(a: &TrainTrace, b: &TrainTrace) -> bool {
    a.records.len() == b.records.len()
        && a.records
            .iter()
            .zip(&b.records)
            .all(|(r, s)| r.step == s.step && r.loss == s.loss && r.grad_norm == s.grad_norm)
        && a.final_theta == b.final_theta
        && a.final_loss == b.final_loss
}

#[test]
fn zero_learning_rate_keeps_loss_constant() {
    let task = small_dfl();
    let trace = train(&task, OracleKind::Ffo, 4, 0.0, 1e-6, 0).unwrap();
    assert_eq!(trace.final_theta, task.theta0);
    let l0 = trace.initial_loss().unwrap();
    assert!(trace.records.iter().all(|r| r.loss == l0));
    assert!((trace.final_loss.unwrap() - l0).abs() < 1e-9);
}

#[test]
fn rejects_bad_schedule() {
    let task = small_dfl();
    assert!(train(&task, OracleKind::Ffo, 0, 0.1, 1e-6, 0).is_err());
    let abort = train(&task, OracleKind::Ffo, 3, -1.0, 1e-6, 0).unwrap_err();
    assert!(abort.partial.records.is_empty());
}

#[test]
fn dfl_training_matches_exact_baseline() {
    let task = small_dfl();
    let exact = train(&task, OracleKind::Exact, 100, 0.05, 1e-6, 0).unwrap();
    let ffo = train(&task, OracleKind::Ffo, 100, 0.05, 1e-6, 0).unwrap();
    let (l0, le, lf) = (
        ffo.initial_loss().unwrap(),
        exact.final_loss.unwrap(),
        ffo.final_loss.unwrap(),
    );
    assert!(lf <= 0.5 * l0, "initial {l0} final {lf}");
    assert!((lf - le).abs() <= 0.05 * le.abs(), "ffo {lf} exact {le}");
}

#[test]
fn dfl_gradients_align_with_exact() {
    let task = small_dfl();
    let run = |oracle| {
        let mut cfg = TrainConfig::new(oracle, 20, 0.05, 1e-6, 0);
        cfg.record_grads = true;
        train_with(&task, &cfg).unwrap().grads
    };
    let (ge, gf) = (run(OracleKind::Exact), run(OracleKind::Ffo));
    for (s, (a, b)) in ge.iter().zip(&gf).enumerate() {
        let cos = a.dot(b) / (a.norm() * b.norm());
        assert!(cos >= 0.999, "step {s}: cosine {cos}");
    }
}

/// Loss of instance `i` as a function of the parameters, differentiated by
/// central differences through the whole pipeline.
fn fd_theta_grad(task: &TaskSpec, i: usize, theta: &Vector, h: f64) -> Vector {
    let cfg = SolverConfig::oracle();
    Vector::from_fn(theta.len(), |k, _| {
        let mut tp = theta.clone();
        tp[k] += h;
        let mut tm = theta.clone();
        tm[k] -= h;
        (task.forward(&tp, i, &cfg).unwrap().2 - task.forward(&tm, i, &cfg).unwrap().2) / (2.0 * h)
    })
}

fn chained_grad(task: &TaskSpec, i: usize, theta: &Vector, oracle: OracleKind) -> Vector {
    let mut cfg = TrainConfig::new(oracle, 1, 0.0, 1e-6, 0);
    cfg.solver = SolverConfig::oracle();
    let (x, sol, _) = task.forward(theta, i, &cfg.solver).unwrap();
    let s = &task.dataset[i];
    let (c, _) = task.loss.eval(&sol.y, &s.target);
    let (gx, ok) = instance_gradient(task, i, &x, &sol, &c, &cfg, 0).unwrap();
    assert!(ok);
    task.model.pullback(&s.feature, &gx)
}

#[test]
fn chained_gradient_matches_finite_differences() {
    let task = dfl_task(3, 8, 4, 6, 4).unwrap();
    let theta = &task.theta0;
    // the held-out instance is the last one
    let i = task.dataset.len() - 1;
    let fd = fd_theta_grad(&task, i, theta, 1e-5);
    for (oracle, tol) in [(OracleKind::Exact, 1e-4), (OracleKind::Ffo, 1e-3)] {
        let g = chained_grad(&task, i, theta, oracle);
        let rel = (&g - &fd).norm() / fd.norm();
        assert!(rel <= tol, "{}: rel error {rel:e}", oracle.as_str());
    }
}

#[test]
fn unconstrained_instance_by_hand() {
    // Q = diag(2, 4), x = W f + b with W = (2, 8)^T, f = 1, b = 0
    // y* = Q^{-1} x = (1, 2), loss = target^T y* = 3
    // dloss/dx = Q^{-1} target = (1/2, 1/4), so dloss/dW = dloss/db = (1/2, 1/4)
    let qp = ParametricQp::unconstrained(
        Matrix::from_diagonal(&Vector::from_row_slice(&[2.0, 4.0])),
        -Matrix::identity(2, 2),
        Vector::zeros(2),
    );
    let task = TaskSpec {
        kind: TaskKind::Custom,
        dataset: vec![Sample {
            feature: Vector::from_row_slice(&[1.0]),
            target: Vector::from_row_slice(&[1.0, 1.0]),
        }],
        model: Model::Linear {
            n_features: 1,
            out_dim: 2,
        },
        loss: Loss::Linear,
        batch_size: 1,
        lower: LowerLevel::Shared(Box::new(make_parametric_qp(qp).unwrap())),
        theta0: Vector::from_row_slice(&[2.0, 8.0, 0.0, 0.0]),
        description: serde_json::Value::Null,
    };
    let (_, sol, loss) = task.forward(&task.theta0, 0, &SolverConfig::oracle()).unwrap();
    assert!((sol.y - Vector::from_row_slice(&[1.0, 2.0])).norm() < 1e-12);
    assert!((loss - 3.0).abs() < 1e-12);
    let want = Vector::from_row_slice(&[0.5, 0.25, 0.5, 0.25]);
    for oracle in [OracleKind::Exact, OracleKind::Ffo] {
        let g = chained_grad(&task, 0, &task.theta0, oracle);
        assert!((g - &want).norm() < 1e-6, "{}", oracle.as_str());
    }
}

#[test]
fn dfl_without_constraints_is_closed_form() {
    let task = dfl_task(1, 4, 3, 4, 0).unwrap();
    let qp: ParametricQp = serde_json::from_value(task.description["qp"].clone()).unwrap();
    let qinv = qp.q.clone().try_inverse().unwrap();
    for i in 0..task.dataset.len() {
        let (x, sol, _) = task.forward(&task.theta0, i, &SolverConfig::oracle()).unwrap();
        assert!((sol.y - &qinv * x).norm() < 1e-9);
    }
}

#[test]
fn dfl_cost_gradient_is_target() {
    let task = small_dfl();
    let y = Vector::from_fn(5, |i, _| i as f64 - 2.0);
    for s in &task.dataset {
        let (c, l) = task.loss.eval(&y, &s.target);
        assert_eq!(c, s.target);
        assert_eq!(l, s.target.dot(&y));
    }
}

#[test]
fn tasks_serialize_reproducibly() {
    let a = dfl_task(0, 20, 5, 5, 3).unwrap().to_json_bytes().unwrap();
    let b = dfl_task(0, 20, 5, 5, 3).unwrap().to_json_bytes().unwrap();
    let c = dfl_task(1, 20, 5, 5, 3).unwrap().to_json_bytes().unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    let a = sudoku_task(4, 3, 1e-2, 0).unwrap().to_json_bytes().unwrap();
    let b = sudoku_task(4, 3, 1e-2, 0).unwrap().to_json_bytes().unwrap();
    assert_eq!(a, b);
}

#[test]
fn invalid_task_arguments() {
    assert!(dfl_task(0, 0, 5, 5, 3).is_err());
    assert!(sudoku_task(5, 2, 1e-2, 0).is_err());
    assert!(sudoku_task(4, 2, 0.0, 0).is_err());
}

#[test]
fn squared_error_vanishes_at_target() {
    let y = Vector::from_fn(64, |i, _| (i % 3) as f64);
    let (c, l) = Loss::SquaredError.eval(&y, &y);
    assert_eq!(c, Vector::zeros(64));
    assert_eq!(l, 0.0);
}

/// Every valid 4x4 board, by brute force over all digit assignments row by row.
fn all_boards() -> Vec<Vec<u8>> {
    let perms: Vec<[u8; 4]> = {
        let mut out = Vec::new();
        for a in 1..=4u8 {
            for b in 1..=4u8 {
                for c in 1..=4u8 {
                    for d in 1..=4u8 {
                        let mut s = [a, b, c, d];
                        s.sort_unstable();
                        if s == [1, 2, 3, 4] {
                            out.push([a, b, c, d]);
                        }
                    }
                }
            }
        }
        out
    };
    let valid = |g: &[u8]| {
        (0..4).all(|c| {
            let mut col: Vec<u8> = (0..4).map(|r| g[r * 4 + c]).collect();
            col.sort_unstable();
            col == [1, 2, 3, 4]
        }) && (0..4).all(|bx| {
            let (r0, c0) = (bx / 2 * 2, bx % 2 * 2);
            let mut b = vec![g[r0 * 4 + c0], g[r0 * 4 + c0 + 1], g[(r0 + 1) * 4 + c0], g[(r0 + 1) * 4 + c0 + 1]];
            b.sort_unstable();
            b == [1, 2, 3, 4]
        })
    };
    let mut boards = Vec::new();
    for r0 in &perms {
        for r1 in &perms {
            for r2 in &perms {
                for r3 in &perms {
                    let g: Vec<u8> = [r0, r1, r2, r3].iter().flat_map(|r| r.iter().copied()).collect();
                    if valid(&g) {
                        boards.push(g);
                    }
                }
            }
        }
    }
    boards
}

#[test]
fn generated_puzzles_have_unique_completion() {
    let boards = all_boards();
    assert_eq!(boards.len(), 288);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let (puzzle, solution) = generate_puzzle(4, &mut rng).unwrap();
        let fits: Vec<&Vec<u8>> = boards
            .iter()
            .filter(|b| puzzle.iter().zip(b.iter()).all(|(&p, &v)| p == 0 || p == v))
            .collect();
        assert_eq!(fits.len(), 1);
        assert_eq!(fits[0], &solution);
        assert!(puzzle.iter().any(|&p| p == 0));
        assert_eq!(count_solutions(&puzzle, 4, 10), 1);
    }
}

#[test]
fn true_rules_reproduce_the_solution() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (_, solution) = generate_puzzle(4, &mut rng).unwrap();
    let target = one_hot(&solution, 4);
    let rules = sudoku_constraints(4).unwrap();
    assert!((&rules * &target - Vector::from_element(rules.nrows(), 1.0)).norm() < 1e-15);
    // fully revealed board as the clue vector
    let spec = ConstraintParamLp::new(1e-2, -&target, &rules, Vector::from_element(64, 0.25), true);
    let problem = make_constraint_param_lp(spec).unwrap();
    let x = Vector::zeros(rules.nrows() * 64);
    let sol = solve_lower(&problem, &x, &SolverConfig::oracle()).unwrap();
    let (_, loss) = Loss::SquaredError.eval(&sol.y, &target);
    assert!(loss < 1e-8, "loss {loss:e}");
}

#[test]
fn sudoku_task_shapes() {
    let task = sudoku_task(4, 3, 1e-2, 1).unwrap();
    task.validate().unwrap();
    assert_eq!(task.model.n_params(), 32 * 64);
    for s in &task.dataset {
        assert!(s.feature.sum() < 16.0);
        assert_eq!(s.target.sum(), 16.0);
        // clues agree with the solution
        assert!(s.feature.iter().zip(s.target.iter()).all(|(&f, &t)| f <= t));
    }
}

#[test]
fn csv_has_fixed_header() {
    let trace = train(&small_dfl(), OracleKind::Ffo, 3, 0.05, 1e-6, 0).unwrap();
    let mut buf = Vec::new();
    trace.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(TrainTrace::CSV_HEADER));
    assert_eq!(lines.count(), 3);
    assert!(text.lines().nth(1).unwrap().starts_with("0,"));
    assert!(text.lines().nth(1).unwrap().ends_with(",ffo"));

    let empty = TrainTrace {
        records: Vec::new(),
        final_theta: Vector::zeros(0),
        final_loss: None,
        grads: Vec::new(),
        uncertified: 0,
    };
    let mut buf = Vec::new();
    empty.write_csv(&mut buf).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap().trim_end(), TrainTrace::CSV_HEADER);
}

#[test]
fn traces_are_deterministic() {
    let task = small_dfl();
    for oracle in [OracleKind::Exact, OracleKind::Ffo] {
        let a = train(&task, oracle, 5, 0.05, 1e-6, 9).unwrap();
        let b = train(&task, oracle, 5, 0.05, 1e-6, 9).unwrap();
        assert!(same_records(&a, &b), "{}", oracle.as_str());
    }
}

#[test]
fn sequential_matches_parallel() {
    let task = small_dfl();
    let mut cfg = TrainConfig::new(OracleKind::Ffo, 4, 0.05, 1e-6, 0);
    cfg.exec = Execution::Sequential;
    let a = train_with(&task, &cfg).unwrap();
    cfg.exec = Execution::Parallel;
    let b = train_with(&task, &cfg).unwrap();
    assert!(same_records(&a, &b));
}

#[test]
fn minibatches_are_subsets() {
    let mut task = small_dfl();
    task.batch_size = 5;
    let trace = train(&task, OracleKind::Ffo, 3, 0.05, 1e-6, 0).unwrap();
    assert_eq!(trace.records.len(), 3);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let idx = batch_indices(20, 5, &mut rng);
    assert_eq!(idx.len(), 5);
    assert!(idx.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn smoothed_oracle_trains() {
    let task = dfl_task(0, 6, 3, 4, 2).unwrap();
    let mut cfg = TrainConfig::new(OracleKind::Smoothed, 3, 0.05, 1e-6, 0);
    cfg.smoothing = (1e-3, 4);
    let trace = train_with(&task, &cfg).unwrap();
    assert_eq!(trace.records.len(), 3);
    assert!(trace.final_loss.unwrap().is_finite());
}

#[test]
fn oracle_names_round_trip() {
    for o in [OracleKind::Ffo, OracleKind::Exact, OracleKind::Smoothed] {
        assert_eq!(o.as_str().parse::<OracleKind>().unwrap(), o);
    }
    assert!("newton".parse::<OracleKind>().is_err());
}
