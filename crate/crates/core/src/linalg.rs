//! Dense decompositions used by the analysis modules, backed by nalgebra.

use nalgebra::{DMatrix, SymmetricEigen};

/// All singular values of a row-major `rows × cols` matrix, descending.
/// Full (non-truncated) Golub–Kahan SVD.
pub fn singular_values(rows: usize, cols: usize, data: &[f64]) -> Vec<f64> {
    assert_eq!(data.len(), rows * cols);
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    let m = DMatrix::from_row_slice(rows, cols, data);
    let mut s: Vec<f64> = m.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Largest singular value (operator 2-norm).
pub fn spectral_norm(rows: usize, cols: usize, data: &[f64]) -> f64 {
    singular_values(rows, cols, data).first().copied().unwrap_or(0.0)
}

/// Eigenvalues of a symmetric `n × n` matrix, descending.
pub fn symmetric_eigenvalues(n: usize, data: &[f64]) -> Vec<f64> {
    assert_eq!(data.len(), n * n);
    if n == 0 {
        return Vec::new();
    }
    let m = DMatrix::from_row_slice(n, n, data);
    let mut ev: Vec<f64> = SymmetricEigen::new(m).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev
}
