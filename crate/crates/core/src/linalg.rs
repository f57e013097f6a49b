//! Small dense linear-algebra kernels that nalgebra does not ship.
//!
//! The centerpiece is a Bunch–Kaufman `P A P^T = L D L^T` factorization for
//! symmetric indefinite matrices, used for every saddle-point (KKT) solve in
//! the crate. Pivots whose magnitude falls below `PIVOT_REL * max|A|` are
//! reported as rank deficiency instead of being silently regularized.

use nalgebra::{SymmetricEigen, SVD};

use crate::error::{Error, Result};
use crate::{Matrix, Vector};

/// Relative pivot threshold for [`SymmetricIndefinite::factor`].
pub const PIVOT_REL: f64 = 1e-12;

#[derive(Debug, Clone, Copy)]
enum Block {
    One(f64),
    Two([[f64; 2]; 2]),
}

/// Bunch–Kaufman factorization of a dense symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymmetricIndefinite {
    l: Matrix,
    blocks: Vec<(usize, Block)>,
    perm: Vec<usize>,
    positive: usize,
    negative: usize,
}

impl SymmetricIndefinite {
    /// Factorizes `a`, reading both triangles (the matrix must be symmetric).
    pub fn factor(a: &Matrix) -> Result<Self> {
        Self::factor_with_tol(a, PIVOT_REL)
    }

    /// As [`factor`](Self::factor) with a caller-chosen relative pivot
    /// threshold. Interior-point systems are ill-conditioned by design and
    /// use a much smaller one.
    pub fn factor_with_tol(a: &Matrix, pivot_rel: f64) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::DimensionMismatch {
                context: "symmetric factorization",
                expected: n,
                actual: a.ncols(),
            });
        }
        let mut a = a.clone();
        let mut l = Matrix::identity(n, n);
        let mut perm: Vec<usize> = (0..n).collect();
        let mut blocks = Vec::new();
        let threshold = pivot_rel * a.amax();
        let alpha = (1.0 + 17f64.sqrt()) / 8.0;
        let (mut positive, mut negative) = (0, 0);

        let mut k = 0;
        while k < n {
            let akk = a[(k, k)].abs();
            let (r, lambda) = (k + 1..n)
                .map(|i| (i, a[(i, k)].abs()))
                .fold((k, 0.0), |acc, v| if v.1 > acc.1 { v } else { acc });
            if akk.max(lambda) <= threshold {
                return Err(Error::RankDeficient {
                    pivot: akk.max(lambda),
                    threshold,
                });
            }
            let two_by_two = if akk >= alpha * lambda {
                false
            } else {
                let sigma = (k..n)
                    .filter(|&j| j != r)
                    .map(|j| a[(r, j)].abs())
                    .fold(0.0, f64::max);
                if akk * sigma >= alpha * lambda * lambda {
                    false
                } else if a[(r, r)].abs() >= alpha * sigma {
                    swap_sym(&mut a, &mut l, &mut perm, k, r);
                    false
                } else {
                    swap_sym(&mut a, &mut l, &mut perm, k + 1, r);
                    true
                }
            };

            if !two_by_two {
                let d = a[(k, k)];
                if d.abs() <= threshold {
                    return Err(Error::RankDeficient {
                        pivot: d.abs(),
                        threshold,
                    });
                }
                if d > 0.0 {
                    positive += 1;
                } else {
                    negative += 1;
                }
                for i in k + 1..n {
                    l[(i, k)] = a[(i, k)] / d;
                }
                for j in k + 1..n {
                    let akj = a[(k, j)];
                    if akj == 0.0 {
                        continue;
                    }
                    for i in k + 1..n {
                        a[(i, j)] -= l[(i, k)] * akj;
                    }
                }
                blocks.push((k, Block::One(d)));
                k += 1;
            } else {
                let k1 = k + 1;
                let (d00, d01, d11) = (a[(k, k)], a[(k1, k)], a[(k1, k1)]);
                let (e_small, e_large) = sym2_eigs(d00, d01, d11);
                if e_small.abs().min(e_large.abs()) <= threshold {
                    return Err(Error::RankDeficient {
                        pivot: e_small.abs().min(e_large.abs()),
                        threshold,
                    });
                }
                for e in [e_small, e_large] {
                    if e > 0.0 {
                        positive += 1;
                    } else {
                        negative += 1;
                    }
                }
                let det = d00 * d11 - d01 * d01;
                let inv = [[d11 / det, -d01 / det], [-d01 / det, d00 / det]];
                for i in k + 2..n {
                    let (w0, w1) = (a[(i, k)], a[(i, k1)]);
                    l[(i, k)] = w0 * inv[0][0] + w1 * inv[1][0];
                    l[(i, k1)] = w0 * inv[0][1] + w1 * inv[1][1];
                }
                for j in k + 2..n {
                    let (ajk, ajk1) = (a[(j, k)], a[(j, k1)]);
                    for i in k + 2..n {
                        a[(i, j)] -= l[(i, k)] * ajk + l[(i, k1)] * ajk1;
                    }
                }
                blocks.push((k, Block::Two([[d00, d01], [d01, d11]])));
                k += 2;
            }
        }
        Ok(Self {
            l,
            blocks,
            perm,
            positive,
            negative,
        })
    }

    pub fn dim(&self) -> usize {
        self.perm.len()
    }

    /// Number of positive and negative eigenvalues (Sylvester inertia).
    pub fn inertia(&self) -> (usize, usize) {
        (self.positive, self.negative)
    }

    pub fn solve(&self, b: &Vector) -> Vector {
        let n = self.dim();
        let mut z = Vector::from_fn(n, |i, _| b[self.perm[i]]);
        for j in 0..n {
            let zj = z[j];
            if zj != 0.0 {
                for i in j + 1..n {
                    z[i] -= self.l[(i, j)] * zj;
                }
            }
        }
        for &(k, block) in &self.blocks {
            match block {
                Block::One(d) => z[k] /= d,
                Block::Two(d) => {
                    let det = d[0][0] * d[1][1] - d[0][1] * d[1][0];
                    let (z0, z1) = (z[k], z[k + 1]);
                    z[k] = (d[1][1] * z0 - d[0][1] * z1) / det;
                    z[k + 1] = (d[0][0] * z1 - d[1][0] * z0) / det;
                }
            }
        }
        for j in (0..n).rev() {
            let mut acc = z[j];
            for i in j + 1..n {
                acc -= self.l[(i, j)] * z[i];
            }
            z[j] = acc;
        }
        let mut out = Vector::zeros(n);
        for i in 0..n {
            out[self.perm[i]] = z[i];
        }
        out
    }

    pub fn solve_matrix(&self, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(b.nrows(), b.ncols());
        for j in 0..b.ncols() {
            out.set_column(j, &self.solve(&b.column(j).into_owned()));
        }
        out
    }
}

fn swap_sym(a: &mut Matrix, l: &mut Matrix, perm: &mut [usize], i: usize, j: usize) {
    if i == j {
        return;
    }
    a.swap_rows(i, j);
    a.swap_columns(i, j);
    perm.swap(i, j);
    let k = i.min(j);
    for c in 0..k {
        let tmp = l[(i, c)];
        l[(i, c)] = l[(j, c)];
        l[(j, c)] = tmp;
    }
}

fn sym2_eigs(a: f64, b: f64, c: f64) -> (f64, f64) {
    let mean = 0.5 * (a + c);
    let rad = (0.25 * (a - c) * (a - c) + b * b).sqrt();
    (mean - rad, mean + rad)
}

/// Assembles `[H B^T; B 0]`.
pub fn saddle_matrix(h: &Matrix, b: &Matrix) -> Matrix {
    let (d, k) = (h.nrows(), b.nrows());
    let mut kkt = Matrix::zeros(d + k, d + k);
    kkt.view_mut((0, 0), (d, d)).copy_from(h);
    if k > 0 {
        kkt.view_mut((d, 0), (k, d)).copy_from(b);
        kkt.view_mut((0, d), (d, k)).copy_from(&b.transpose());
    }
    kkt
}

/// Greedy selection of a maximal set of linearly independent rows, scanning
/// rows in order. A row is kept when its component orthogonal to the rows
/// already kept exceeds `rel_tol` times the largest row norm.
pub fn independent_rows(m: &Matrix, rel_tol: f64) -> Vec<usize> {
    let scale = (0..m.nrows())
        .map(|i| m.row(i).norm())
        .fold(0.0, f64::max);
    if scale == 0.0 {
        return Vec::new();
    }
    let mut basis: Vec<Vector> = Vec::new();
    let mut keep = Vec::new();
    for i in 0..m.nrows() {
        let mut v: Vector = m.row(i).transpose();
        for _ in 0..2 {
            for q in &basis {
                let proj = q.dot(&v);
                v.axpy(-proj, q, 1.0);
            }
        }
        let norm = v.norm();
        if norm > rel_tol * scale {
            basis.push(v / norm);
            keep.push(i);
        }
    }
    keep
}

/// Minimum-norm least-squares solution of `a z = b` via SVD.
pub fn pinv_solve(a: &Matrix, b: &Vector) -> Vector {
    if a.nrows() == 0 || a.ncols() == 0 {
        return Vector::zeros(a.ncols());
    }
    let svd = SVD::new(a.clone(), true, true);
    let cutoff = 1e-13 * svd.singular_values.max();
    svd.solve(b, cutoff).expect("u and v_t were computed")
}

/// Minimum-norm least-squares solution for several right-hand sides.
pub fn pinv_solve_matrix(a: &Matrix, b: &Matrix) -> Matrix {
    if a.nrows() == 0 || a.ncols() == 0 {
        return Matrix::zeros(a.ncols(), b.ncols());
    }
    let svd = SVD::new(a.clone(), true, true);
    let cutoff = 1e-13 * svd.singular_values.max();
    svd.solve(b, cutoff).expect("u and v_t were computed")
}

/// Smallest singular value among the first `min(rows, cols)`; zero for empty.
pub fn min_singular_value(a: &Matrix) -> f64 {
    if a.nrows() == 0 || a.ncols() == 0 {
        return 0.0;
    }
    SVD::new(a.clone(), false, false).singular_values.min()
}

pub fn spectral_norm(a: &Matrix) -> f64 {
    if a.nrows() == 0 || a.ncols() == 0 {
        return 0.0;
    }
    SVD::new(a.clone(), false, false).singular_values.max()
}

/// Extreme eigenvalues `(min, max)` of a symmetric matrix.
pub fn sym_eig_range(a: &Matrix) -> (f64, f64) {
    if a.nrows() == 0 {
        return (f64::INFINITY, f64::NEG_INFINITY);
    }
    let eig = SymmetricEigen::new(a.clone());
    (eig.eigenvalues.min(), eig.eigenvalues.max())
}

pub fn inf_norm(v: &Vector) -> f64 {
    v.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}
