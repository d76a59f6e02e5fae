//! Learned block-diagonal transforms for a single weight matrix.
//!
//! For `W: d₁×d₂` and an invertible block-diagonal `M: d₁×d₁`, the layer keeps
//! `M⁻¹·Q(M·W)`. Under stochastic rounding with one quantization group per row
//! of `M·W`, the expected squared reconstruction error is bounded by
//!
//! ```text
//! d₂/(2^N − 1)² · Σᵢ Σⱼ (M⁻¹)ᵢⱼ² · ‖(M·W)ⱼ‖∞²
//! ```
//!
//! where `(M·W)ⱼ` is row `j`. That bound is the training loss. Because `M` and
//! `M⁻¹` share the block structure the bound splits into one independent term
//! per block, so every block is optimized on its own.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{decomp, random_rotation, randomized_hadamard, DenseMatrix, Seed};
use crate::optim::{Adam, AdamConfig};
use crate::quant::{quantize, QuantConfig, QuantizedMatrix};

/// Smallest acceptable `|det|` of a block.
pub const MIN_BLOCK_DET: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct BlockDiagTransform {
    dim: usize,
    block_size: usize,
    blocks: Vec<DenseMatrix>,
    inverse_blocks: Vec<DenseMatrix>,
}

impl BlockDiagTransform {
    pub fn from_blocks(blocks: Vec<DenseMatrix>) -> Result<Self> {
        let k = blocks
            .first()
            .ok_or_else(|| Error::Config("block-diagonal transform needs a block".into()))?
            .rows();
        let mut inverse_blocks = Vec::with_capacity(blocks.len());
        for (i, b) in blocks.iter().enumerate() {
            if b.shape() != (k, k) {
                return Err(Error::shape("block-diagonal transform", (k, k), b.shape()));
            }
            inverse_blocks.push(checked_block_inverse(b, i)?);
        }
        Ok(Self {
            dim: k * blocks.len(),
            block_size: k,
            blocks,
            inverse_blocks,
        })
    }

    pub fn identity(dim: usize, block_size: usize) -> Result<Self> {
        check_blocking(dim, block_size)?;
        Self::from_blocks(vec![DenseMatrix::identity(block_size); dim / block_size])
    }

    /// Every block an independent random rotation.
    pub fn init_blocks(dim: usize, block_size: usize, seed: Seed) -> Result<Self> {
        Self::init_composed(dim, block_size, seed, 0)
    }

    /// Random-rotation blocks optionally composed with randomized Hadamard
    /// factors: one factor gives `R·H`, two give `H₁·R·H₂`.
    pub fn init_composed(
        dim: usize,
        block_size: usize,
        seed: Seed,
        hadamard_factors: u8,
    ) -> Result<Self> {
        check_blocking(dim, block_size)?;
        let blocks = (0..dim / block_size)
            .map(|i| {
                let s = seed.derive_index(i as u64);
                let r = random_rotation(block_size, s)?;
                Ok(match hadamard_factors {
                    0 => r,
                    1 => r.mul(&randomized_hadamard(block_size, s.derive("post"))?),
                    2 => randomized_hadamard(block_size, s.derive("pre"))?
                        .mul(&r)
                        .mul(&randomized_hadamard(block_size, s.derive("post"))?),
                    n => {
                        return Err(Error::Config(format!(
                            "at most two Hadamard factors are supported, got {n}"
                        )))
                    }
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_blocks(blocks)
    }

    /// Fixed baseline: each block a randomized Hadamard matrix.
    pub fn hadamard_blocks(dim: usize, block_size: usize, seed: Seed) -> Result<Self> {
        check_blocking(dim, block_size)?;
        let blocks = (0..dim / block_size)
            .map(|i| randomized_hadamard(block_size, seed.derive_index(i as u64)))
            .collect::<Result<Vec<_>>>()?;
        Self::from_blocks(blocks)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn blocks(&self) -> &[DenseMatrix] {
        &self.blocks
    }

    pub fn inverse_blocks(&self) -> &[DenseMatrix] {
        &self.inverse_blocks
    }

    /// `M·W`.
    pub fn apply(&self, w: &DenseMatrix) -> Result<DenseMatrix> {
        self.blockwise(&self.blocks, w)
    }

    /// `M⁻¹·X`.
    pub fn apply_inverse(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        self.blockwise(&self.inverse_blocks, x)
    }

    fn blockwise(&self, blocks: &[DenseMatrix], w: &DenseMatrix) -> Result<DenseMatrix> {
        if w.rows() != self.dim {
            return Err(Error::shape(
                "block-diagonal apply",
                (self.dim, self.dim),
                w.shape(),
            ));
        }
        let k = self.block_size;
        let parts: Vec<DenseMatrix> = blocks
            .iter()
            .enumerate()
            .map(|(i, b)| b.mul(&w.row_block(i * k, k)))
            .collect();
        DenseMatrix::vstack(&parts)
    }

    pub fn to_dense(&self) -> DenseMatrix {
        assemble(&self.blocks, self.dim, self.block_size)
    }

    pub fn inverse_dense(&self) -> DenseMatrix {
        assemble(&self.inverse_blocks, self.dim, self.block_size)
    }

    /// Multiply-adds needed to apply `M⁻¹` to one `d`-vector: `d·k`.
    pub fn flops_per_vector(&self) -> usize {
        self.dim * self.block_size
    }

    /// Same transform with every entry rounded to `f32`, as stored on disk.
    pub fn rounded_to_f32(&self) -> Result<Self> {
        Self::from_blocks(self.blocks.iter().map(|b| b.rounded_to_f32()).collect())
    }
}

fn assemble(blocks: &[DenseMatrix], dim: usize, k: usize) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(dim, dim);
    for (i, b) in blocks.iter().enumerate() {
        for r in 0..k {
            for c in 0..k {
                out[(i * k + r, i * k + c)] = b[(r, c)];
            }
        }
    }
    out
}

fn check_blocking(dim: usize, block_size: usize) -> Result<()> {
    if block_size == 0 || dim == 0 || dim % block_size != 0 {
        return Err(Error::Config(format!(
            "block size {block_size} does not divide dimension {dim}"
        )));
    }
    Ok(())
}

fn checked_block_inverse(b: &DenseMatrix, index: usize) -> Result<DenseMatrix> {
    let singular = || Error::Singular { block: Some(index) };
    let lu = decomp::Lu::factor(b).map_err(|_| singular())?;
    if lu.determinant().abs() <= MIN_BLOCK_DET {
        return Err(singular());
    }
    let inv = lu.inverse().map_err(|_| singular())?;
    let err = b
        .mul(&inv)
        .sub(&DenseMatrix::identity(b.rows()))?
        .frobenius();
    if err > 1e-8 {
        return Err(singular());
    }
    Ok(inv)
}

/// How the row maximum `‖v‖∞` enters the loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InfNorm {
    /// Differentiate through the arg-max entry (lowest column on ties).
    ExactSubgradient,
    /// Replace `‖v‖∞` with `(1/τ)·log Σ exp(τ|vₗ|)`.
    Smoothed { tau: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SingleLossConfig {
    pub bits: u8,
    pub inf_norm: InfNorm,
    pub adam: AdamConfig,
    pub iterations: usize,
    /// Loss trace cadence in steps.
    #[serde(default = "default_trace_every")]
    pub trace_every: usize,
    /// Randomized Hadamard factors folded into the rotation initialization.
    #[serde(default)]
    pub hadamard_factors: u8,
}

fn default_trace_every() -> usize {
    100
}

impl Default for SingleLossConfig {
    fn default() -> Self {
        Self {
            bits: 4,
            inf_norm: InfNorm::ExactSubgradient,
            adam: AdamConfig::new(0.01),
            iterations: 20_000,
            trace_every: default_trace_every(),
            hadamard_factors: 0,
        }
    }
}

impl SingleLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=8).contains(&self.bits) {
            return Err(Error::Config(format!("bits must be in [1, 8], got {}", self.bits)));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if let InfNorm::Smoothed { tau } = self.inf_norm {
            if !(tau > 0.0) {
                return Err(Error::Config("smoothing temperature must be positive".into()));
            }
        }
        Ok(())
    }

    /// `d₂/(2^N − 1)²`.
    pub fn prefactor(&self, cols: usize) -> f64 {
        let levels = ((1u32 << self.bits) - 1) as f64;
        cols as f64 / (levels * levels)
    }
}

/// Row maxima of `p` and, per row, the weights `∂rⱼ/∂pⱼₗ`.
struct RowMaxima {
    values: Vec<f64>,
    /// Exact mode: `(argmax column, sign)` per row.
    argmax: Vec<(usize, f64)>,
    /// Smoothed mode: dense derivative, row-major like `p`.
    dense: Option<DenseMatrix>,
}

fn row_maxima(p: &DenseMatrix, inf: InfNorm, want_grad: bool) -> RowMaxima {
    let rows = p.rows();
    match inf {
        InfNorm::ExactSubgradient => {
            let mut values = Vec::with_capacity(rows);
            let mut argmax = Vec::with_capacity(rows);
            for r in 0..rows {
                let (mut best, mut at) = (-1.0, 0);
                for (c, v) in p.row(r).iter().enumerate() {
                    if v.abs() > best {
                        best = v.abs();
                        at = c;
                    }
                }
                let v = p[(r, at)];
                values.push(v.abs());
                argmax.push((at, if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 }));
            }
            RowMaxima {
                values,
                argmax,
                dense: None,
            }
        }
        InfNorm::Smoothed { tau } => {
            let mut values = Vec::with_capacity(rows);
            let mut dense = want_grad.then(|| DenseMatrix::zeros(rows, p.cols()));
            for r in 0..rows {
                let row = p.row(r);
                let peak = row.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
                let sum: f64 = row.iter().map(|v| (tau * (v.abs() - peak)).exp()).sum();
                values.push(peak + sum.ln() / tau);
                if let Some(d) = dense.as_mut() {
                    for (out, v) in d.row_mut(r).iter_mut().zip(row) {
                        let weight = (tau * (v.abs() - peak)).exp() / sum;
                        *out = weight * v.signum() * (*v != 0.0) as u8 as f64;
                    }
                }
            }
            RowMaxima {
                values,
                argmax: Vec::new(),
                dense,
            }
        }
    }
}

/// Loss of one block given its inverse and `B·W_b`.
fn block_loss_from_parts(inv: &DenseMatrix, mw: &DenseMatrix, prefactor: f64, inf: InfNorm) -> f64 {
    let maxima = row_maxima(mw, inf, false);
    let k = inv.rows();
    let mut total = 0.0;
    for j in 0..k {
        let col: f64 = (0..k).map(|i| inv[(i, j)] * inv[(i, j)]).sum();
        total += col * maxima.values[j] * maxima.values[j];
    }
    prefactor * total
}

/// Loss and Euclidean gradient of one block.
pub fn block_objective(
    block: &DenseMatrix,
    w_block: &DenseMatrix,
    prefactor: f64,
    inf: InfNorm,
) -> Result<(f64, DenseMatrix)> {
    let k = block.rows();
    let inv = decomp::inverse(block)?;
    let mw = block.mul(w_block);
    let maxima = row_maxima(&mw, inf, true);
    let col_norm2: Vec<f64> = (0..k)
        .map(|j| (0..k).map(|i| inv[(i, j)] * inv[(i, j)]).sum())
        .collect();
    let r2: Vec<f64> = maxima.values.iter().map(|r| r * r).collect();
    let loss = prefactor * col_norm2.iter().zip(&r2).map(|(a, b)| a * b).sum::<f64>();

    // Through M⁻¹: ∂L/∂A = 2c·A·diag(r²), then ∂L/∂M = −Aᵀ·(∂L/∂A)·Aᵀ.
    let mut g_inv = inv.clone();
    for i in 0..k {
        for (x, r2j) in g_inv.row_mut(i).iter_mut().zip(&r2) {
            *x *= 2.0 * prefactor * r2j;
        }
    }
    let mut grad = inv.mul_tn(&g_inv).mul_nt(&inv).scale(-1.0);

    // Through the row maxima of M·W: ∂L/∂M = (∂L/∂P)·Wᵀ.
    let g_r: Vec<f64> = (0..k)
        .map(|j| 2.0 * prefactor * col_norm2[j] * maxima.values[j])
        .collect();
    match maxima.dense {
        None => {
            for (j, &(a, s)) in maxima.argmax.iter().enumerate() {
                let f = g_r[j] * s;
                if f == 0.0 {
                    continue;
                }
                for m in 0..k {
                    grad[(j, m)] += f * w_block[(m, a)];
                }
            }
        }
        Some(mut dp) => {
            for j in 0..k {
                for x in dp.row_mut(j) {
                    *x *= g_r[j];
                }
            }
            grad.axpy(1.0, &dp.mul_nt(w_block));
        }
    }
    if !loss.is_finite() || !grad.is_finite() {
        return Err(Error::NonFinite("surrogate gradient"));
    }
    Ok((loss, grad))
}

fn check_shapes(m: &BlockDiagTransform, w: &DenseMatrix) -> Result<()> {
    if m.dim() != w.rows() {
        return Err(Error::shape("surrogate loss", (m.dim(), m.dim()), w.shape()));
    }
    Ok(())
}

/// Per-block terms of the surrogate loss; they sum to the full loss.
pub fn surrogate_block_losses(
    m: &BlockDiagTransform,
    w: &DenseMatrix,
    cfg: &SingleLossConfig,
) -> Result<Vec<f64>> {
    check_shapes(m, w)?;
    let k = m.block_size();
    let prefactor = cfg.prefactor(w.cols());
    Ok(m.blocks()
        .iter()
        .zip(m.inverse_blocks())
        .enumerate()
        .map(|(i, (b, inv))| {
            let mw = b.mul(&w.row_block(i * k, k));
            block_loss_from_parts(inv, &mw, prefactor, cfg.inf_norm)
        })
        .collect())
}

/// Upper bound on `E‖M⁻¹·Q_stoch(M·W) − W‖²_F` with one group per row of `M·W`.
pub fn surrogate_loss(m: &BlockDiagTransform, w: &DenseMatrix, cfg: &SingleLossConfig) -> Result<f64> {
    Ok(surrogate_block_losses(m, w, cfg)?.iter().sum())
}

/// Gradient of [`surrogate_loss`] with respect to each block.
pub fn surrogate_grad(
    m: &BlockDiagTransform,
    w: &DenseMatrix,
    cfg: &SingleLossConfig,
) -> Result<Vec<DenseMatrix>> {
    check_shapes(m, w)?;
    let k = m.block_size();
    let prefactor = cfg.prefactor(w.cols());
    m.blocks()
        .iter()
        .enumerate()
        .map(|(i, b)| {
            block_objective(b, &w.row_block(i * k, k), prefactor, cfg.inf_norm)
                .map(|(_, g)| g)
                .map_err(|e| match e {
                    Error::Singular { .. } => Error::Singular { block: Some(i) },
                    other => other,
                })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTracePoint {
    pub iteration: usize,
    pub block_index: usize,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct SingleOutcome {
    pub transform: BlockDiagTransform,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub trace: Vec<LossTracePoint>,
}

struct BlockRun {
    best: DenseMatrix,
    initial: f64,
    best_loss: f64,
    trace: Vec<LossTracePoint>,
}

fn optimize_block(
    index: usize,
    init: DenseMatrix,
    w_block: &DenseMatrix,
    prefactor: f64,
    cfg: &SingleLossConfig,
) -> Result<BlockRun> {
    let diverged = |iteration| Error::Divergence {
        iteration,
        block: Some(index),
    };
    let mut block = init;
    let mut adam = Adam::new(cfg.adam, block.data().len());
    let mut best = block.clone();
    let mut best_loss = f64::INFINITY;
    let mut initial = f64::NAN;
    let mut trace = Vec::new();
    for it in 0..=cfg.iterations {
        let (loss, grad) = match block_objective(&block, w_block, prefactor, cfg.inf_norm) {
            Ok(v) => v,
            Err(Error::Singular { .. }) | Err(Error::NonFinite(_)) => return Err(diverged(it)),
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            return Err(diverged(it));
        }
        if it == 0 {
            initial = loss;
        }
        if it % cfg.trace_every.max(1) == 0 || it == cfg.iterations {
            trace.push(LossTracePoint {
                iteration: it,
                block_index: index,
                loss,
            });
        }
        if loss < best_loss && decomp::determinant(&block)?.abs() > MIN_BLOCK_DET {
            best_loss = loss;
            best.clone_from(&block);
        }
        if it == cfg.iterations || loss == 0.0 {
            break;
        }
        adam.step(&mut block, &grad);
    }
    Ok(BlockRun {
        best,
        initial,
        best_loss,
        trace,
    })
}

/// Learns a block-diagonal transform for `w` starting from random rotations.
///
/// Returns the best iterate of each block rather than the last one, so the
/// result never scores worse than its initialization. Blocks run in parallel;
/// each uses a seed derived from `seed` and its index, so the schedule does not
/// affect the result.
pub fn optimize_single(
    w: &DenseMatrix,
    block_size: usize,
    cfg: &SingleLossConfig,
    seed: Seed,
) -> Result<SingleOutcome> {
    cfg.validate()?;
    let init = BlockDiagTransform::init_composed(w.rows(), block_size, seed, cfg.hadamard_factors)?;
    optimize_single_from(w, init, cfg)
}

/// Same as [`optimize_single`] from a caller-chosen starting transform.
pub fn optimize_single_from(
    w: &DenseMatrix,
    init: BlockDiagTransform,
    cfg: &SingleLossConfig,
) -> Result<SingleOutcome> {
    cfg.validate()?;
    check_shapes(&init, w)?;
    let k = init.block_size();
    let prefactor = cfg.prefactor(w.cols());
    let runs = init
        .blocks
        .into_par_iter()
        .enumerate()
        .map(|(i, b)| optimize_block(i, b, &w.row_block(i * k, k), prefactor, cfg))
        .collect::<Result<Vec<_>>>()?;

    let initial_loss = runs.iter().map(|r| r.initial).sum();
    let final_loss = runs.iter().map(|r| r.best_loss).sum();
    let mut trace: Vec<LossTracePoint> = runs.iter().flat_map(|r| r.trace.iter().copied()).collect();
    trace.sort_by_key(|p| (p.iteration, p.block_index));
    let transform = BlockDiagTransform::from_blocks(runs.into_iter().map(|r| r.best).collect())?;
    Ok(SingleOutcome {
        transform,
        initial_loss,
        final_loss,
        trace,
    })
}

/// `Q(M·W)` together with the transform needed to undo it.
#[derive(Debug, Clone)]
pub struct TransformedQuant {
    pub quantized: QuantizedMatrix,
    pub transform: BlockDiagTransform,
}

impl TransformedQuant {
    /// `M⁻¹·dequantize(Q(M·W))`.
    pub fn reconstruct(&self) -> Result<DenseMatrix> {
        self.transform.apply_inverse(&self.quantized.dequantize())
    }
}

pub fn quantize_with_transform(
    w: &DenseMatrix,
    m: &BlockDiagTransform,
    qcfg: &QuantConfig,
) -> Result<TransformedQuant> {
    let mw = m.apply(w)?;
    Ok(TransformedQuant {
        quantized: quantize(&mw, qcfg)?,
        transform: m.clone(),
    })
}

/// `M⁻¹·(M·W)`, the round trip with quantization switched off.
pub fn reconstruct_unquantized(w: &DenseMatrix, m: &BlockDiagTransform) -> Result<DenseMatrix> {
    m.apply_inverse(&m.apply(w)?)
}

/// Frobenius error of `M⁻¹·Q(M·W)` against `W`, relative to `‖W‖_F`.
pub fn transformed_relative_error(
    w: &DenseMatrix,
    m: &BlockDiagTransform,
    qcfg: &QuantConfig,
) -> Result<f64> {
    let tq = quantize_with_transform(w, m, qcfg)?;
    crate::quant::relative_error(w, &tq.reconstruct()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::random::gaussian_matrix;
    use crate::linalg::Axis;

    fn cfg(bits: u8, inf: InfNorm) -> SingleLossConfig {
        SingleLossConfig {
            bits,
            inf_norm: inf,
            adam: AdamConfig::new(1e-2),
            iterations: 200,
            trace_every: 100,
            hadamard_factors: 0,
        }
    }

    #[test]
    fn init_structure() {
        let m = BlockDiagTransform::init_blocks(4, 2, Seed(5)).unwrap();
        let dense = m.to_dense();
        for r in 0..4 {
            for c in 0..4 {
                if r / 2 != c / 2 {
                    assert_eq!(dense[(r, c)], 0.0);
                }
            }
        }
        assert!(dense.orthogonality_error() <= 1e-10);
        let full = BlockDiagTransform::init_blocks(6, 6, Seed(1)).unwrap();
        assert_eq!(full.num_blocks(), 1);
        assert!(BlockDiagTransform::init_blocks(6, 4, Seed(1)).is_err());
        assert_eq!(m, BlockDiagTransform::init_blocks(4, 2, Seed(5)).unwrap());
    }

    #[test]
    fn hadamard_composition_stays_orthogonal() {
        for n in 0..=2 {
            let m = BlockDiagTransform::init_composed(16, 8, Seed(3), n).unwrap();
            assert!(m.to_dense().orthogonality_error() < 1e-10);
        }
        assert!(BlockDiagTransform::init_composed(16, 8, Seed(3), 3).is_err());
    }

    #[test]
    fn inverse_round_trip() {
        let mut rng = Seed(9).rng();
        let blocks = (0..3).map(|_| gaussian_matrix(4, 4, &mut rng)).collect();
        let m = BlockDiagTransform::from_blocks(blocks).unwrap();
        let x = gaussian_matrix(12, 3, &mut rng);
        let back = m.apply_inverse(&m.apply(&x).unwrap()).unwrap();
        assert!(back.sub(&x).unwrap().frobenius() <= 1e-8 * x.frobenius());
        assert_eq!(m.flops_per_vector(), 12 * 4);
    }

    #[test]
    fn singular_block_is_rejected() {
        let bad = DenseMatrix::from_rows(&[[1.0, 2.0], [2.0, 4.0]]).unwrap();
        let err = BlockDiagTransform::from_blocks(vec![DenseMatrix::identity(2), bad]).unwrap_err();
        assert!(matches!(err, Error::Singular { block: Some(1) }));
    }

    #[test]
    fn identity_loss_value() {
        for d in [1usize, 2, 4, 8] {
            for bits in [1u8, 2, 4] {
                let m = BlockDiagTransform::identity(d, d).unwrap();
                let loss = surrogate_loss(&m, &DenseMatrix::identity(d), &cfg(bits, InfNorm::ExactSubgradient)).unwrap();
                let levels = ((1u32 << bits) - 1) as f64;
                assert!((loss - (d * d) as f64 / (levels * levels)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn loss_is_quadratic_in_weights() {
        let mut rng = Seed(2).rng();
        let w = gaussian_matrix(8, 5, &mut rng);
        let m = BlockDiagTransform::init_blocks(8, 4, Seed(3)).unwrap();
        let c = cfg(3, InfNorm::ExactSubgradient);
        let base = surrogate_loss(&m, &w, &c).unwrap();
        let scaled = surrogate_loss(&m, &w.scale(-2.5), &c).unwrap();
        assert!((scaled - 6.25 * base).abs() < 1e-10 * scaled);
    }

    #[test]
    fn loss_decomposes_and_permutes_with_blocks() {
        let mut rng = Seed(4).rng();
        let w = gaussian_matrix(12, 7, &mut rng);
        let m = BlockDiagTransform::init_blocks(12, 4, Seed(8)).unwrap();
        let c = cfg(4, InfNorm::ExactSubgradient);
        let parts = surrogate_block_losses(&m, &w, &c).unwrap();
        let total = surrogate_loss(&m, &w, &c).unwrap();
        assert!((parts.iter().sum::<f64>() - total).abs() <= 1e-12 * total.max(1.0));
        for (i, part) in parts.iter().enumerate() {
            let single = BlockDiagTransform::from_blocks(vec![m.blocks()[i].clone()]).unwrap();
            let alone = surrogate_loss(&single, &w.row_block(i * 4, 4), &c).unwrap();
            assert!((alone - part).abs() <= 1e-12 * part.max(1.0));
        }
        // permute blocks (2, 0, 1) together with their rows of W
        let order = [2usize, 0, 1];
        let pm = BlockDiagTransform::from_blocks(order.iter().map(|&i| m.blocks()[i].clone()).collect()).unwrap();
        let pw = DenseMatrix::vstack(&order.iter().map(|&i| w.row_block(i * 4, 4)).collect::<Vec<_>>()).unwrap();
        let permuted = surrogate_loss(&pm, &pw, &c).unwrap();
        assert!((permuted - total).abs() <= 1e-12 * total);
    }

    fn finite_difference(block: &DenseMatrix, w: &DenseMatrix, pre: f64, inf: InfNorm, h: f64) -> DenseMatrix {
        let loss = |b: &DenseMatrix| {
            let inv = decomp::inverse(b).unwrap();
            block_loss_from_parts(&inv, &b.mul(w), pre, inf)
        };
        let mut g = DenseMatrix::zeros(block.rows(), block.cols());
        for r in 0..block.rows() {
            for c in 0..block.cols() {
                let mut plus = block.clone();
                plus[(r, c)] += h;
                let mut minus = block.clone();
                minus[(r, c)] -= h;
                g[(r, c)] = (loss(&plus) - loss(&minus)) / (2.0 * h);
            }
        }
        g
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = Seed(11).rng();
        for trial in 0..5 {
            let block = gaussian_matrix(4, 4, &mut rng).add(&DenseMatrix::identity(4).scale(2.0)).unwrap();
            let w = gaussian_matrix(4, 6, &mut rng);
            for inf in [InfNorm::ExactSubgradient, InfNorm::Smoothed { tau: 3.0 }] {
                let (_, g) = block_objective(&block, &w, 0.7, inf).unwrap();
                let fd = finite_difference(&block, &w, 0.7, inf, 1e-5);
                let rel = g.sub(&fd).unwrap().frobenius() / fd.frobenius();
                assert!(rel < 1e-4, "trial {trial} {inf:?}: {rel}");
            }
        }
    }

    #[test]
    fn smoothed_gradient_tends_to_subgradient() {
        let mut rng = Seed(12).rng();
        let block = gaussian_matrix(4, 4, &mut rng).add(&DenseMatrix::identity(4).scale(2.0)).unwrap();
        let w = gaussian_matrix(4, 6, &mut rng);
        let (_, exact) = block_objective(&block, &w, 1.0, InfNorm::ExactSubgradient).unwrap();
        let gaps: Vec<f64> = [10.0, 100.0, 1000.0]
            .iter()
            .map(|&tau| {
                let (_, g) = block_objective(&block, &w, 1.0, InfNorm::Smoothed { tau }).unwrap();
                g.sub(&exact).unwrap().frobenius() / exact.frobenius()
            })
            .collect();
        assert!(gaps[1] < gaps[0] && gaps[2] <= gaps[1], "{gaps:?}");
        assert!(gaps[2] < 1e-6, "{gaps:?}");
    }

    #[test]
    fn symmetric_toy_is_stationary_over_rotations() {
        // W = I, smoothed loss: the 45° rotation is a strict minimum by symmetry.
        let inf = InfNorm::Smoothed { tau: 10.0 };
        let rot = |t: f64| DenseMatrix::from_rows(&[[t.cos(), -t.sin()], [t.sin(), t.cos()]]).unwrap();
        let w = DenseMatrix::identity(2);
        let theta = std::f64::consts::FRAC_PI_4;
        let m = rot(theta);
        let (loss, g) = block_objective(&m, &w, 1.0, inf).unwrap();
        for d in [-1e-2, 1e-2] {
            let (other, _) = block_objective(&rot(theta + d), &w, 1.0, inf).unwrap();
            assert!(other > loss);
        }
        // Riemannian gradient on SO(2): skew part of Mᵀ·G.
        let mg = m.mul_tn(&g);
        let skew = mg.sub(&mg.transpose()).unwrap().scale(0.5);
        assert!(skew.frobenius() <= 1e-6, "{}", skew.frobenius());
    }

    #[test]
    fn zero_weights_stay_put() {
        let w = DenseMatrix::zeros(8, 4);
        let out = optimize_single(&w, 4, &cfg(4, InfNorm::ExactSubgradient), Seed(1)).unwrap();
        assert_eq!(out.initial_loss, 0.0);
        assert_eq!(out.final_loss, 0.0);
        assert_eq!(out.transform, BlockDiagTransform::init_blocks(8, 4, Seed(1)).unwrap());
    }

    #[test]
    fn best_iterate_never_worse_than_init() {
        let mut rng = Seed(21).rng();
        let mut w = gaussian_matrix(16, 16, &mut rng);
        w[(3, 5)] = 80.0;
        let c = SingleLossConfig { iterations: 300, ..cfg(4, InfNorm::ExactSubgradient) };
        let out = optimize_single(&w, 16, &c, Seed(2)).unwrap();
        let init = BlockDiagTransform::init_blocks(16, 16, Seed(2)).unwrap();
        let init_loss = surrogate_loss(&init, &w, &c).unwrap();
        assert!((out.initial_loss - init_loss).abs() < 1e-9 * init_loss);
        assert!(out.final_loss <= init_loss);
        let recomputed = surrogate_loss(&out.transform, &w, &c).unwrap();
        assert!((recomputed - out.final_loss).abs() < 1e-9 * recomputed);
        assert!(out.trace.iter().any(|p| p.iteration == 100));
    }

    #[test]
    fn divergence_is_reported() {
        let mut rng = Seed(5).rng();
        let w = gaussian_matrix(4, 4, &mut rng);
        let c = SingleLossConfig { adam: AdamConfig::new(1e6), iterations: 200, ..cfg(4, InfNorm::ExactSubgradient) };
        match optimize_single(&w, 4, &c, Seed(0)) {
            Err(Error::Divergence { .. }) | Ok(_) => {}
            Err(e) => panic!("unexpected error {e}"),
        }
    }

    #[test]
    fn transform_round_trip_without_quantization() {
        let mut rng = Seed(6).rng();
        let w = gaussian_matrix(8, 3, &mut rng);
        let m = BlockDiagTransform::init_blocks(8, 4, Seed(1)).unwrap();
        let back = reconstruct_unquantized(&w, &m).unwrap();
        assert!(back.sub(&w).unwrap().frobenius() <= 1e-8 * w.frobenius());
    }

    #[test]
    fn identity_transform_is_plain_quantization() {
        let mut rng = Seed(7).rng();
        let w = gaussian_matrix(8, 5, &mut rng);
        let qcfg = QuantConfig::per_channel(4, Axis::Rows);
        let tq = quantize_with_transform(&w, &BlockDiagTransform::identity(8, 4).unwrap(), &qcfg).unwrap();
        let plain = quantize(&w, &qcfg).unwrap();
        assert_eq!(tq.quantized, plain);
        assert_eq!(tq.reconstruct().unwrap(), plain.dequantize());
    }
}
