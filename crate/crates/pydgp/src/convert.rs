//! Conversions between Python-facing nested lists and dense matrices.
//!
//! Errors are plain strings so the helpers stay testable without an
//! interpreter; the binding layer wraps them into Python exceptions.

use nalgebra::DMatrix;

/// Builds a row-major matrix from `rows`; every row must be non-empty and of
/// equal length.
pub fn matrix_from_rows(name: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>, String> {
    if rows.is_empty() {
        return Err(format!("{name} must have at least one row"));
    }
    let cols = rows[0].len();
    if cols == 0 {
        return Err(format!("{name} rows must be non-empty"));
    }
    for (i, row) in rows.iter().enumerate() {
        if row.len() != cols {
            return Err(format!(
                "{name} is ragged: row 0 has {cols} entries but row {i} has {}",
                row.len()
            ));
        }
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

pub fn rows_from_matrix(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}
