//! Row-major JSON encoding for dense matrices and plain arrays for vectors.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::{Matrix, Vector};

pub fn matrix_to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

/// Builds a matrix from rows; `ncols` is used when there are no rows.
pub fn matrix_from_rows(rows: &[Vec<f64>], ncols: usize) -> Result<Matrix, String> {
    if rows.is_empty() {
        return Ok(Matrix::zeros(0, ncols));
    }
    let width = rows[0].len();
    if let Some(bad) = rows.iter().position(|r| r.len() != width) {
        return Err(format!(
            "row {bad} has {} entries, expected {width}",
            rows[bad].len()
        ));
    }
    Ok(Matrix::from_fn(rows.len(), width, |i, j| rows[i][j]))
}

pub mod vector {
    use super::*;

    pub fn serialize<S: Serializer>(v: &Vector, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vector, D::Error> {
        Ok(Vector::from_vec(Vec::<f64>::deserialize(d)?))
    }
}
