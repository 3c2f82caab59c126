//! Small dense helpers shared by the pointwise kernels.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::grid::Field;

/// Rows x cols matrix stored row-major at grid point `p`, starting at
/// component `offset`.
pub(crate) fn matrix_at(field: &Field, p: usize, offset: usize, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, &field.at(p)[offset..offset + rows * cols])
}

pub(crate) fn write_matrix(out: &mut [f64], m: &DMatrix<f64>) {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out[i * m.ncols() + j] = m[(i, j)];
        }
    }
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    let sym = (m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
}

/// Ratio of the extreme singular values; infinite for singular matrices.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 1.0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= 0.0 || !min.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

/// `σ_min / σ_max` of a (possibly rectangular) matrix; 0 for the zero matrix.
pub fn singular_value_ratio(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return 0.0;
    }
    sv.iter().cloned().fold(f64::INFINITY, f64::min) / max
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |acc, v| acc.max(v.abs()))
}
