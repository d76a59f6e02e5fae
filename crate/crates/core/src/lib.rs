//! Calibration-free post-training weight quantization.
//!
//! The crate learns weight-only, data-free transforms that flatten outliers
//! before uniform quantization:
//!
//! - [`single`]: a block-diagonal invertible `M` per weight matrix, trained on
//!   an upper bound of the expected stochastic-rounding error of `M⁻¹·Q(M·W)`.
//! - [`paired`]: a dense invertible `M` shared by two consecutive matrices,
//!   `(W₁M, M⁻¹W₂)`, which costs nothing at inference.
//! - [`adaptive`]: alternating pseudoinverse-compensated rounding of a pair.
//!
//! [`pipeline`] ties these together over a tensor manifest and writes a packed
//! artifact that [`artifact`] can decode without any outside information.

pub mod adaptive;
pub mod artifact;
pub mod error;
pub mod linalg;
pub mod manifest;
pub mod optim;
pub mod packing;
pub mod paired;
pub mod pipeline;
pub mod quant;
pub mod report;
pub mod selfcheck;
pub mod single;

pub use error::{Error, Result};
pub use linalg::{Axis, DenseMatrix, Seed};
pub use quant::{
    dequantize, quantize, quantize_stochastic, relative_error, Granularity, QuantConfig,
    QuantizedMatrix, Rounding,
};
