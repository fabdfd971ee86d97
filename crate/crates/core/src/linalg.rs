//! Bridges to nalgebra for the few dense decompositions we need.

use nalgebra::DMatrix;
use ndarray::{Array2, ArrayView2};

pub fn to_dmatrix(a: ArrayView2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

pub fn from_dmatrix(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

/// Largest singular value (spectral norm).
pub fn operator_norm(a: ArrayView2<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    to_dmatrix(a)
        .singular_values()
        .iter()
        .fold(0.0f64, |acc, &s| acc.max(s))
}
