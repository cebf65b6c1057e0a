//! Small dense linear-algebra helpers shared by the set, plant and controller code.

use nalgebra::{DMatrix, DVector};

/// Spectral radius from the complex eigenvalues of a square matrix.
pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    assert!(a.is_square(), "spectral radius of a non-square matrix");
    if a.nrows() == 0 {
        return 0.0;
    }
    a.complex_eigenvalues()
        .iter()
        .map(|l| l.norm())
        .fold(0.0, f64::max)
}

/// Tolerance below 1 the spectral radius has to stay for a matrix to count as Schur stable.
pub const SCHUR_TOL: f64 = 1e-8;

pub fn is_schur_stable(a: &DMatrix<f64>) -> bool {
    spectral_radius(a) < 1.0 - SCHUR_TOL
}

/// Matrix exponential by scaling and squaring of a truncated Taylor series.
///
/// The series is summed until the last term's max-norm falls below machine
/// precision relative to the partial sum, well inside a `1e-12` truncation budget.
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    assert!(a.is_square(), "expm of a non-square matrix");
    let n = a.nrows();
    let norm = a.iter().map(|v| v.abs()).fold(0.0, f64::max) * n as f64;
    let mut squarings = 0u32;
    if norm > 0.5 {
        squarings = (norm / 0.5).log2().ceil() as u32;
    }
    let scaled = a / 2f64.powi(squarings as i32);

    let mut sum = DMatrix::<f64>::identity(n, n);
    let mut term = DMatrix::<f64>::identity(n, n);
    for k in 1..64 {
        term = &term * &scaled / k as f64;
        sum += &term;
        if term.amax() <= f64::EPSILON * sum.amax() {
            break;
        }
    }
    for _ in 0..squarings {
        sum = &sum * &sum;
    }
    sum
}

/// Infinity norm (max absolute entry) of a matrix or vector.
pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.amax()
}

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    m.is_square() && (m - m.transpose()).amax() <= tol
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_sym_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    symmetrize(m)
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Dense vector from a slice.
pub fn dvec(values: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(values)
}

/// Diagonal matrix from a slice.
pub fn diag(values: &[f64]) -> DMatrix<f64> {
    DMatrix::from_diagonal(&dvec(values))
}

/// Row-major matrix constructor.
pub fn dmat(rows: usize, cols: usize, row_major: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, row_major)
}
