//! Alternating pseudoinverse-compensated rounding of a coupled pair.
//!
//! After rounding `W₁`, the error it introduces is pushed into `W₂` by
//! quantizing `Ŵ₁†·W₁·W₂` instead of `W₂`, and vice versa. Both outputs stay
//! plain [`QuantizedMatrix`] values.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{pinv, Axis, DenseMatrix, DEFAULT_RCOND};
use crate::paired::PairedTransform;
use crate::quant::{quantize, QuantConfig, QuantizedMatrix};

/// Relative PQE improvement below which iteration stops early.
pub const EARLY_STOP_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveRoundConfig {
    /// Full alternations; `0` runs a single compensated rounding of `W₂`.
    pub iterations: usize,
    /// Quantizer for `W₁` (`d₁×h`).
    pub q1: QuantConfig,
    /// Quantizer for `W₂` (`h×d₂`).
    pub q2: QuantConfig,
    #[serde(default = "default_rcond")]
    pub rcond: f64,
    #[serde(default = "default_early_stop")]
    pub early_stop: bool,
}

fn default_rcond() -> f64 {
    DEFAULT_RCOND
}

fn default_early_stop() -> bool {
    true
}

impl Default for AdaptiveRoundConfig {
    fn default() -> Self {
        Self::with_quantizer(3, QuantConfig::per_channel(4, Axis::Rows))
    }
}

impl AdaptiveRoundConfig {
    /// Uses `q` for `W₁` and its transpose for `W₂`, so both sides are grouped
    /// along the shared inner dimension.
    pub fn with_quantizer(iterations: usize, q: QuantConfig) -> Self {
        Self {
            iterations,
            q1: q,
            q2: q.transposed(),
            rcond: DEFAULT_RCOND,
            early_stop: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rcond > 0.0 && self.rcond < 1.0) {
            return Err(Error::Config(format!("rcond must lie in (0, 1), got {}", self.rcond)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    /// Independent rounding of both matrices.
    Initial,
    W1,
    W2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub step: usize,
    pub side: Side,
    pub pqe: f64,
}

#[derive(Debug, Clone)]
pub struct AdaptiveOutcome {
    pub w1: QuantizedMatrix,
    pub w2: QuantizedMatrix,
    /// PQE of the returned pair.
    pub pqe: f64,
    pub independent_pqe: f64,
    pub best_step: usize,
    pub trace: Vec<TracePoint>,
    pub note: Option<String>,
}

impl AdaptiveOutcome {
    /// `pqe / ‖W₁W₂‖_F` given the exact product norm.
    pub fn relative(&self, product_norm: f64) -> f64 {
        self.pqe / product_norm
    }
}

/// `Ŵ₁†·W₁·W₂`: the `W₂` that best compensates the rounding of `W₁`.
pub fn compensation_target(
    w1_hat: &DenseMatrix,
    w1: &DenseMatrix,
    w2: &DenseMatrix,
    rcond: f64,
) -> Result<DenseMatrix> {
    if w1_hat.shape() != w1.shape() {
        return Err(Error::shape("compensation target", w1_hat.shape(), w1.shape()));
    }
    let product = w1.matmul(w2)?;
    pinv(w1_hat, rcond)?.matmul(&product)
}

fn pair_pqe(product: &DenseMatrix, a: &QuantizedMatrix, b: &QuantizedMatrix) -> f64 {
    let approx = a.dequantize().mul(&b.dequantize());
    // Shapes are fixed by construction.
    approx.sub(product).map(|d| d.frobenius()).unwrap_or(f64::INFINITY)
}

/// Runs the alternating scheme and returns the lowest-PQE pair seen,
/// including the independent rounding, so the result never loses to it.
pub fn adaptive_round(w1: &DenseMatrix, w2: &DenseMatrix, cfg: &AdaptiveRoundConfig) -> Result<AdaptiveOutcome> {
    adaptive_round_with(w1, w2, cfg, quantize)
}

/// [`adaptive_round`] over an arbitrary base quantizer.
pub fn adaptive_round_with<Q>(
    w1: &DenseMatrix,
    w2: &DenseMatrix,
    cfg: &AdaptiveRoundConfig,
    quantize: Q,
) -> Result<AdaptiveOutcome>
where
    Q: Fn(&DenseMatrix, &QuantConfig) -> Result<QuantizedMatrix>,
{
    cfg.validate()?;
    if w1.cols() != w2.rows() {
        return Err(Error::shape("adaptive rounding", w1.shape(), w2.shape()));
    }
    let product = w1.mul(w2);
    let mut q1 = quantize(w1, &cfg.q1)?;
    let mut q2 = quantize(w2, &cfg.q2)?;
    let initial = pair_pqe(&product, &q1, &q2);
    let mut trace = vec![TracePoint {
        step: 0,
        side: Side::Initial,
        pqe: initial,
    }];
    let mut out = AdaptiveOutcome {
        w1: q1.clone(),
        w2: q2.clone(),
        pqe: initial,
        independent_pqe: initial,
        best_step: 0,
        trace: Vec::new(),
        note: None,
    };
    if product.frobenius() == 0.0 {
        out.note = Some("all-zero product; kept independent rounding".into());
        out.trace = trace;
        return Ok(out);
    }
    if initial == 0.0 {
        out.note = Some("exact at initialization".into());
        out.trace = trace;
        return Ok(out);
    }

    let mut record = |side: Side, a: &QuantizedMatrix, b: &QuantizedMatrix, trace: &mut Vec<TracePoint>| {
        let p = pair_pqe(&product, a, b);
        let step = trace.len();
        trace.push(TracePoint { step, side, pqe: p });
        if p < out.pqe {
            out.pqe = p;
            out.best_step = step;
            out.w1 = a.clone();
            out.w2 = b.clone();
        }
        p
    };

    let half_w2 = |q1: &QuantizedMatrix| -> Result<QuantizedMatrix> {
        let target = pinv(&q1.dequantize(), cfg.rcond)?.matmul(&product)?;
        quantize(&target, &cfg.q2)
    };
    let half_w1 = |q2: &QuantizedMatrix| -> Result<QuantizedMatrix> {
        let target = product.matmul(&pinv(&q2.dequantize(), cfg.rcond)?)?;
        quantize(&target, &cfg.q1)
    };

    if cfg.iterations == 0 {
        q2 = half_w2(&q1)?;
        record(Side::W2, &q1, &q2, &mut trace);
    } else {
        let mut previous = initial;
        for _ in 0..cfg.iterations {
            q2 = half_w2(&q1)?;
            record(Side::W2, &q1, &q2, &mut trace);
            q1 = half_w1(&q2)?;
            let current = record(Side::W1, &q1, &q2, &mut trace);
            if cfg.early_stop && previous - current < EARLY_STOP_TOLERANCE * previous {
                break;
            }
            previous = current;
        }
    }
    out.trace = trace;
    Ok(out)
}

/// Applies a learned paired transform, then rounds `(W₁M, M⁻¹W₂)` adaptively.
pub fn adaptive_round_transformed(
    w1: &DenseMatrix,
    w2: &DenseMatrix,
    transform: &PairedTransform,
    cfg: &AdaptiveRoundConfig,
) -> Result<AdaptiveOutcome> {
    let (u, v) = transform.apply(w1, w2)?;
    adaptive_round(&u, &v, cfg)
}

/// Order-of-magnitude cost, `max(I, 1)·d·h·min(d, h)`, dominated by the SVDs.
pub fn complexity_report(d: usize, h: usize, iterations: usize) -> u128 {
    iterations.max(1) as u128 * d as u128 * h as u128 * d.min(h) as u128
}

/// Writes the trace as CSV with columns `step,side,pqe`.
pub fn write_trace_csv<W: Write>(trace: &[TracePoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for p in trace {
        w.serialize(p)?;
    }
    w.flush().map_err(|e| Error::io("<trace>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::random::gaussian_matrix;
    use crate::linalg::Seed;

    fn toy() -> DenseMatrix {
        DenseMatrix::from_rows(&[[1.0, 0.0], [0.0, 0.6]]).unwrap()
    }

    #[test]
    fn toy_half_iteration() {
        let w = toy();
        let cfg = AdaptiveRoundConfig::with_quantizer(0, QuantConfig::per_tensor(1));
        let out = adaptive_round(&w, &w, &cfg).unwrap();
        assert!((out.independent_pqe - 0.64).abs() < 1e-12);
        assert!((out.pqe - 0.36).abs() < 1e-12);
        assert_eq!(out.trace.len(), 2);
        let expected = DenseMatrix::from_rows(&[[1.0, 0.0], [0.0, 0.0]]).unwrap();
        assert_eq!(out.w2.dequantize(), expected);
    }

    #[test]
    fn toy_compensation_target() {
        let w = toy();
        let t = compensation_target(&DenseMatrix::identity(2), &w, &w, DEFAULT_RCOND).unwrap();
        let expected = DenseMatrix::from_rows(&[[1.0, 0.0], [0.0, 0.36]]).unwrap();
        assert!(t.max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn compensation_with_exact_first_factor_recovers_w2() {
        let mut rng = Seed(4).rng();
        let w1 = gaussian_matrix(10, 6, &mut rng);
        let w2 = gaussian_matrix(6, 7, &mut rng);
        let t = compensation_target(&w1, &w1, &w2, DEFAULT_RCOND).unwrap();
        assert!(t.sub(&w2).unwrap().frobenius() <= 1e-8 * w2.frobenius());
    }

    #[test]
    fn rank_deficient_target_lies_in_row_space() {
        let mut rng = Seed(8).rng();
        let a = gaussian_matrix(6, 2, &mut rng);
        let b = gaussian_matrix(2, 5, &mut rng);
        let w1_hat = a.mul(&b);
        let w1 = gaussian_matrix(6, 5, &mut rng);
        let w2 = gaussian_matrix(5, 4, &mut rng);
        let t = compensation_target(&w1_hat, &w1, &w2, DEFAULT_RCOND).unwrap();
        let p = pinv(&w1_hat, DEFAULT_RCOND).unwrap().mul(&w1_hat);
        assert!(p.mul(&p).max_abs_diff(&p) < 1e-10);
        assert!(p.mul(&t).max_abs_diff(&t) < 1e-9);
    }

    #[test]
    fn representable_pair_returns_immediately() {
        let w = DenseMatrix::from_rows(&[[0.0, 1.0], [2.0, 3.0]]).unwrap();
        let cfg = AdaptiveRoundConfig::with_quantizer(3, QuantConfig::per_tensor(2));
        let out = adaptive_round(&w, &w, &cfg).unwrap();
        assert_eq!(out.pqe, 0.0);
        assert_eq!(out.trace.len(), 1);
    }

    #[test]
    fn zero_product_keeps_independent_rounding() {
        let w1 = DenseMatrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let w2 = DenseMatrix::from_rows(&[[0.0], [1.0]]).unwrap();
        let out = adaptive_round(&w1, &w2, &AdaptiveRoundConfig::default()).unwrap();
        assert!(out.note.is_some());
        assert_eq!(out.trace.len(), 1);
    }

    #[test]
    fn random_pairs_improve_on_average() {
        let cfg = AdaptiveRoundConfig::with_quantizer(3, QuantConfig::per_channel(4, Axis::Rows));
        let mut wins = 0;
        let mut reduction = 0.0;
        let trials = 100;
        for s in 0..trials {
            let mut rng = Seed(s).rng();
            let w1 = gaussian_matrix(16, 8, &mut rng);
            let w2 = gaussian_matrix(8, 16, &mut rng);
            let out = adaptive_round(&w1, &w2, &cfg).unwrap();
            assert!(out.pqe <= out.independent_pqe);
            if out.pqe < out.independent_pqe {
                wins += 1;
            }
            reduction += 1.0 - out.pqe / out.independent_pqe;
        }
        assert!(wins >= 90, "wins {wins}");
        assert!(reduction / trials as f64 >= 0.10, "mean reduction {}", reduction / trials as f64);
    }

    #[test]
    fn outputs_are_fixed_points_of_the_quantizer() {
        let mut rng = Seed(2).rng();
        let w1 = gaussian_matrix(12, 6, &mut rng);
        let w2 = gaussian_matrix(6, 9, &mut rng);
        let cfg = AdaptiveRoundConfig::default();
        let out = adaptive_round(&w1, &w2, &cfg).unwrap();
        let again = quantize(&out.w1.dequantize(), &cfg.q1).unwrap();
        assert_eq!(again.codes(), out.w1.codes());
        let again = quantize(&out.w2.dequantize(), &cfg.q2).unwrap();
        assert_eq!(again.codes(), out.w2.codes());
    }

    #[test]
    fn trace_length_counts_half_steps() {
        let mut rng = Seed(3).rng();
        let w1 = gaussian_matrix(8, 8, &mut rng);
        let w2 = gaussian_matrix(8, 8, &mut rng);
        let mut cfg = AdaptiveRoundConfig::with_quantizer(4, QuantConfig::per_channel(3, Axis::Rows));
        cfg.early_stop = false;
        let out = adaptive_round(&w1, &w2, &cfg).unwrap();
        assert_eq!(out.trace.len(), 1 + 2 * 4);
        let mut buf = Vec::new();
        write_trace_csv(&out.trace, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("step,side,pqe\n0,initial,"));
        assert_eq!(text.lines().count(), 10);
    }

    #[test]
    fn complexity_examples() {
        assert_eq!(complexity_report(256, 256, 3), 3 * 256u128.pow(3));
        assert_eq!(complexity_report(256, 256, 0), 256u128.pow(3));
        assert_eq!(complexity_report(64, 256, 2), 2 * complexity_report(64, 128, 2));
        assert_eq!(complexity_report(256, 128, 1), 4 * complexity_report(256, 64, 1));
    }

    #[test]
    fn rejects_bad_rcond() {
        let mut cfg = AdaptiveRoundConfig::default();
        cfg.rcond = 1.0;
        let w = toy();
        assert!(matches!(adaptive_round(&w, &w, &cfg), Err(Error::Config(_))));
    }
}
