//! Dense real linear algebra used by every other module.

pub mod decomp;
mod matrix;
pub mod random;

pub use decomp::{determinant, inverse, pinv, qr, svd, Lu, SvdResult, DEFAULT_RCOND};
pub use matrix::{Axis, DenseMatrix};
pub use random::{random_rotation, randomized_hadamard, Seed};

/// Matrix product with shape checking.
pub fn matmul(a: &DenseMatrix, b: &DenseMatrix) -> crate::Result<DenseMatrix> {
    a.matmul(b)
}

pub fn frobenius(a: &DenseMatrix) -> f64 {
    a.frobenius()
}

pub fn infinity_norm(a: &DenseMatrix) -> f64 {
    a.infinity_norm()
}

pub fn channel_abs_max(a: &DenseMatrix, axis: Axis) -> Vec<f64> {
    a.channel_abs_max(axis)
}
