//! Small dense linear algebra helpers on top of `nalgebra`.
//!
//! The systems in this crate are tiny (d ≤ 16), so everything is dense and
//! singularity is judged with an explicit 1-norm reciprocal condition number.

use nalgebra::{DMatrix, DVector, Dyn, LU};

use crate::error::{Error, Result};

/// Below this reciprocal condition number a matrix is treated as singular.
pub const RCOND_SINGULAR: f64 = 1e-14;

pub fn one_norm(a: &DMatrix<f64>) -> f64 {
    a.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// LU factorization with partial pivoting plus the explicit inverse, kept for reuse.
#[derive(Debug, Clone)]
pub struct Factorized {
    lu: LU<f64, Dyn, Dyn>,
    inverse: DMatrix<f64>,
    rcond: f64,
}

impl Factorized {
    pub fn new(a: &DMatrix<f64>, what: &str) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::mismatch(what, "square matrix", format!("{}x{}", a.nrows(), a.ncols())));
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: what.to_string() });
        }
        let lu = a.clone().lu();
        let singular = |rcond: f64| Error::Singular {
            what: what.to_string(),
            rcond,
        };
        let inverse = lu.try_inverse().ok_or_else(|| singular(0.0))?;
        let norm_a = one_norm(a);
        let norm_inv = one_norm(&inverse);
        let rcond = if norm_a == 0.0 { 0.0 } else { 1.0 / (norm_a * norm_inv) };
        if !(rcond >= RCOND_SINGULAR) {
            return Err(singular(if rcond.is_finite() { rcond } else { 0.0 }));
        }
        Ok(Self { lu, inverse, rcond })
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.lu
            .solve(b)
            .expect("factorization was checked to be nonsingular")
    }

    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.lu
            .solve(b)
            .expect("factorization was checked to be nonsingular")
    }

    pub fn inverse(&self) -> &DMatrix<f64> {
        &self.inverse
    }

    pub fn rcond(&self) -> f64 {
        self.rcond
    }
}

pub fn matrix_from_rows(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    for (i, row) in rows.iter().enumerate() {
        if row.len() != ncols {
            return Err(Error::mismatch(format!("{what} row {i}"), ncols, row.len()));
        }
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub fn matrix_to_rows(a: &DMatrix<f64>) -> Vec<Vec<f64>> {
    a.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Row-major copy, used by the hot loops.
pub fn to_row_major(a: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len());
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            out.push(a[(i, j)]);
        }
    }
    out
}

/// Sum with a fixed binary tree, so the result does not depend on how work is split.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const LEAF: usize = 8;
    if values.len() <= LEAF {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}
