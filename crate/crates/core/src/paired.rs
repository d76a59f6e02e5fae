//! Learned dense transforms for coupled matrix pairs.
//!
//! For consecutive layers `W₁: d₁×d₂` and `W₂: d₂×d₃` with no nonlinearity in
//! between, any invertible `M: d₂×d₂` leaves the product unchanged:
//! `(W₁M)(M⁻¹W₂) = W₁W₂`. We pick `M` so that `U = W₁M` and `V = M⁻¹W₂`
//! quantize well, by minimizing a pseudo-loss over the channel maxima
//! `m_u(i) = maxⱼ |Uᵢⱼ|` and `m_v(j) = maxᵢ |Vᵢⱼ|`.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{decomp, random_rotation, randomized_hadamard, svd, Axis, DenseMatrix, Seed};
use crate::optim::{Adam, AdamConfig};
use crate::quant::{quantize, QuantConfig};

/// Singular values of a learned `M` above this are logged as suspicious.
pub const SIGMA_WARN_THRESHOLD: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PairedLossKind {
    /// `(1/t)·log(Σᵢ exp(t·m_u(i)) + Σⱼ exp(t·m_v(j)))`.
    LogSumExp { t: f64 },
    /// `Σ m_u(i)²/d₁ + Σ m_v(j)²/d₃`.
    SumSq,
    /// `‖V‖_F·Σ m_u(i)²/d₁ + ‖U‖_F·Σ m_v(j)²/d₃`.
    SumSqWted,
}

impl Default for PairedLossKind {
    fn default() -> Self {
        PairedLossKind::LogSumExp { t: 5.0 }
    }
}

impl PairedLossKind {
    pub fn validate(&self) -> Result<()> {
        if let PairedLossKind::LogSumExp { t } = self {
            if !(*t > 0.0) {
                return Err(Error::Config(format!("LogSumExp temperature must be positive, got {t}")));
            }
        }
        Ok(())
    }

    pub fn label(&self) -> &'static str {
        match self {
            PairedLossKind::LogSumExp { .. } => "log_sum_exp",
            PairedLossKind::SumSq => "sum_sq",
            PairedLossKind::SumSqWted => "sum_sq_wted",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PairedOptimizer {
    /// Unconstrained Adam on the entries of `M`.
    Adam(AdamConfig),
    /// Steps along the orthogonal group through the Cayley transform.
    CayleySgd { lr: f64, momentum: f64 },
}

impl PairedOptimizer {
    pub fn label(&self) -> &'static str {
        match self {
            PairedOptimizer::Adam(_) => "adam",
            PairedOptimizer::CayleySgd { .. } => "cayley",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairedInit {
    #[default]
    Identity,
    RandomRotation,
    Hadamard,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PairedOptConfig {
    pub optimizer: PairedOptimizer,
    /// Weight of `‖MMᵀ − I‖_F/√d`; the Cayley path ignores it.
    pub lambda_orth: f64,
    pub iterations: usize,
    /// Cadence of PQE checkpoints (and of Cayley re-orthonormalization).
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
    /// Quantizer for `U`; `V` uses the same config with channels transposed.
    #[serde(default = "default_track_quant")]
    pub track_quant: QuantConfig,
    #[serde(default)]
    pub init: PairedInit,
}

fn default_checkpoint_every() -> usize {
    1000
}

fn default_track_quant() -> QuantConfig {
    QuantConfig::per_channel(4, Axis::Rows)
}

impl Default for PairedOptConfig {
    fn default() -> Self {
        Self {
            optimizer: PairedOptimizer::Adam(AdamConfig::new(1e-3).with_beta1(0.1)),
            lambda_orth: 0.1,
            iterations: 100_000,
            checkpoint_every: default_checkpoint_every(),
            track_quant: default_track_quant(),
            init: PairedInit::Identity,
        }
    }
}

impl PairedOptConfig {
    pub fn validate(&self) -> Result<()> {
        let lr = match self.optimizer {
            PairedOptimizer::Adam(a) => a.lr,
            PairedOptimizer::CayleySgd { lr, momentum } => {
                if !(0.0..1.0).contains(&momentum) {
                    return Err(Error::Config(format!("momentum must lie in [0, 1), got {momentum}")));
                }
                lr
            }
        };
        if !(lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        if !(self.lambda_orth >= 0.0) {
            return Err(Error::Config("orthonormal penalty weight must be non-negative".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint cadence must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub loss: PairedLossKind,
    pub optimizer: PairedOptimizer,
    pub lambda_orth: f64,
    pub iterations: usize,
    pub best_iteration: usize,
    pub final_pseudo_loss: f64,
    pub final_relative_pqe: f64,
    pub min_sigma: f64,
    pub max_sigma: f64,
}

/// An invertible `M` together with its inverse.
#[derive(Debug, Clone)]
pub struct PairedTransform {
    m: DenseMatrix,
    m_inv: DenseMatrix,
    pub provenance: Option<Provenance>,
}

impl PairedTransform {
    pub fn from_matrix(m: DenseMatrix) -> Result<Self> {
        let m_inv = decomp::inverse(&m)?;
        let d = m.rows();
        let err = m.mul(&m_inv).sub(&DenseMatrix::identity(d))?.frobenius();
        if err > 1e-7 * (d as f64).sqrt() {
            return Err(Error::Singular { block: None });
        }
        Ok(Self {
            m,
            m_inv,
            provenance: None,
        })
    }

    pub fn identity(d: usize) -> Self {
        Self {
            m: DenseMatrix::identity(d),
            m_inv: DenseMatrix::identity(d),
            provenance: None,
        }
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.m
    }

    pub fn inverse(&self) -> &DenseMatrix {
        &self.m_inv
    }

    pub fn dim(&self) -> usize {
        self.m.rows()
    }

    /// `(W₁M, M⁻¹W₂)`.
    pub fn apply(&self, w1: &DenseMatrix, w2: &DenseMatrix) -> Result<(DenseMatrix, DenseMatrix)> {
        Ok((w1.matmul(&self.m)?, self.m_inv.matmul(w2)?))
    }

    /// Same transform rounded to `f32`, as stored on disk.
    pub fn rounded_to_f32(&self) -> Result<Self> {
        let mut out = Self::from_matrix(self.m.rounded_to_f32())?;
        out.provenance = self.provenance.clone();
        Ok(out)
    }
}

fn check_pair(w1: &DenseMatrix, w2: &DenseMatrix, m: &DenseMatrix) -> Result<()> {
    if w1.cols() != w2.rows() {
        return Err(Error::shape("paired matrices", w1.shape(), w2.shape()));
    }
    if m.shape() != (w1.cols(), w1.cols()) {
        return Err(Error::shape("paired transform", m.shape(), (w1.cols(), w1.cols())));
    }
    Ok(())
}

/// Maxima with the position and sign of the entry attaining each.
struct Maxima {
    values: Vec<f64>,
    at: Vec<usize>,
    sign: Vec<f64>,
}

fn maxima(a: &DenseMatrix, axis: Axis) -> Maxima {
    let n = match axis {
        Axis::Rows => a.rows(),
        Axis::Cols => a.cols(),
    };
    let mut values = vec![-1.0; n];
    let mut at = vec![0; n];
    let mut sign = vec![0.0; n];
    for r in 0..a.rows() {
        for (c, &v) in a.row(r).iter().enumerate() {
            let (ch, pos) = match axis {
                Axis::Rows => (r, c),
                Axis::Cols => (c, r),
            };
            if v.abs() > values[ch] {
                values[ch] = v.abs();
                at[ch] = pos;
                sign[ch] = v.signum() * (v != 0.0) as u8 as f64;
            }
        }
    }
    Maxima { values, at, sign }
}

/// Overflow-safe `(1/t)·log Σ exp(t·xᵢ)` and its softmax weights.
pub fn log_sum_exp(xs: &[f64], t: f64) -> (f64, Vec<f64>) {
    let peak = xs.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let exps: Vec<f64> = xs.iter().map(|&x| (t * (x - peak)).exp()).collect();
    let sum: f64 = exps.iter().sum();
    (peak + sum.ln() / t, exps.into_iter().map(|e| e / sum).collect())
}

/// Pseudo-loss value from the two channel-maxima vectors (and, for the
/// weighted variant, the Frobenius norms of `U` and `V`).
pub fn pseudo_loss_from_maxima(kind: PairedLossKind, mu: &[f64], mv: &[f64], u_fro: f64, v_fro: f64) -> f64 {
    let d1 = mu.len() as f64;
    let d3 = mv.len() as f64;
    let sq = |xs: &[f64]| xs.iter().map(|x| x * x).sum::<f64>();
    match kind {
        PairedLossKind::LogSumExp { t } => {
            let all: Vec<f64> = mu.iter().chain(mv).copied().collect();
            log_sum_exp(&all, t).0
        }
        PairedLossKind::SumSq => sq(mu) / d1 + sq(mv) / d3,
        PairedLossKind::SumSqWted => v_fro * sq(mu) / d1 + u_fro * sq(mv) / d3,
    }
}

pub fn paired_pseudo_loss(w1: &DenseMatrix, w2: &DenseMatrix, m: &DenseMatrix, kind: PairedLossKind) -> Result<f64> {
    check_pair(w1, w2, m)?;
    kind.validate()?;
    let inv = decomp::inverse(m)?;
    let u = w1.mul(m);
    let v = inv.mul(w2);
    let mu = maxima(&u, Axis::Rows);
    let mv = maxima(&v, Axis::Cols);
    Ok(pseudo_loss_from_maxima(kind, &mu.values, &mv.values, u.frobenius(), v.frobenius()))
}

/// `‖MMᵀ − I‖_F / √d`.
pub fn orth_penalty(m: &DenseMatrix) -> f64 {
    m.orthogonality_error() / (m.rows() as f64).sqrt()
}

fn orth_penalty_grad(m: &DenseMatrix) -> DenseMatrix {
    let d = m.rows();
    let mut e = m.mul_nt(m);
    for i in 0..d {
        e[(i, i)] -= 1.0;
    }
    let norm = e.frobenius();
    if norm == 0.0 {
        return DenseMatrix::zeros(d, d);
    }
    e.mul(m).scale(2.0 / (norm * (d as f64).sqrt()))
}

/// Pseudo-loss plus `λ·orth_penalty`, and the gradient with respect to `M`.
pub fn paired_objective(
    w1: &DenseMatrix,
    w2: &DenseMatrix,
    m: &DenseMatrix,
    kind: PairedLossKind,
    lambda_orth: f64,
) -> Result<(f64, DenseMatrix)> {
    check_pair(w1, w2, m)?;
    let inv = decomp::inverse(m)?;
    let u = w1.mul(m);
    let v = inv.mul(w2);
    let mu = maxima(&u, Axis::Rows);
    let mv = maxima(&v, Axis::Cols);
    let (d1, d3) = (u.rows() as f64, v.cols() as f64);
    let (u_fro, v_fro) = (u.frobenius(), v.frobenius());

    let mut g_u = DenseMatrix::zeros(u.rows(), u.cols());
    let mut g_v = DenseMatrix::zeros(v.rows(), v.cols());
    let (dmu, dmv): (Vec<f64>, Vec<f64>) = match kind {
        PairedLossKind::LogSumExp { t } => {
            let all: Vec<f64> = mu.values.iter().chain(&mv.values).copied().collect();
            let (_, p) = log_sum_exp(&all, t);
            let (a, b) = p.split_at(mu.values.len());
            (a.to_vec(), b.to_vec())
        }
        PairedLossKind::SumSq => (
            mu.values.iter().map(|x| 2.0 * x / d1).collect(),
            mv.values.iter().map(|x| 2.0 * x / d3).collect(),
        ),
        PairedLossKind::SumSqWted => {
            let su: f64 = mu.values.iter().map(|x| x * x).sum();
            let sv: f64 = mv.values.iter().map(|x| x * x).sum();
            if v_fro > 0.0 {
                g_v.axpy(su / d1 / v_fro, &v);
            }
            if u_fro > 0.0 {
                g_u.axpy(sv / d3 / u_fro, &u);
            }
            (
                mu.values.iter().map(|x| v_fro * 2.0 * x / d1).collect(),
                mv.values.iter().map(|x| u_fro * 2.0 * x / d3).collect(),
            )
        }
    };
    let loss = pseudo_loss_from_maxima(kind, &mu.values, &mv.values, u_fro, v_fro);
    for (i, g) in dmu.iter().enumerate() {
        g_u[(i, mu.at[i])] += g * mu.sign[i];
    }
    for (j, g) in dmv.iter().enumerate() {
        g_v[(mv.at[j], j)] += g * mv.sign[j];
    }
    // U = W₁M gives W₁ᵀ·G_U; V = M⁻¹W₂ gives −M⁻ᵀ·(G_V·W₂ᵀ)·M⁻ᵀ.
    let mut grad = w1.mul_tn(&g_u);
    let through_inv = inv.mul_tn(&g_v.mul_nt(w2)).mul_nt(&inv);
    grad.axpy(-1.0, &through_inv);

    let mut total = loss;
    if lambda_orth > 0.0 {
        total += lambda_orth * orth_penalty(m);
        grad.axpy(lambda_orth, &orth_penalty_grad(m));
    }
    if !total.is_finite() || !grad.is_finite() {
        return Err(Error::NonFinite("paired objective"));
    }
    Ok((total, grad))
}

/// Gradient of pseudo-loss plus `λ·orth_penalty` with respect to `M`.
pub fn paired_grad(
    w1: &DenseMatrix,
    w2: &DenseMatrix,
    m: &DenseMatrix,
    kind: PairedLossKind,
    lambda_orth: f64,
) -> Result<DenseMatrix> {
    paired_objective(w1, w2, m, kind, lambda_orth).map(|(_, g)| g)
}

/// Momentum carried between Cayley steps.
#[derive(Debug, Clone)]
pub struct CayleyState {
    momentum: DenseMatrix,
    beta: f64,
}

impl CayleyState {
    pub fn new(d: usize, beta: f64) -> Self {
        Self {
            momentum: DenseMatrix::zeros(d, d),
            beta,
        }
    }
}

/// One Cayley SGD step, which stays on the orthogonal group.
///
/// With momentum `P ← β·P + G` and skew direction `A = P·Mᵀ − M·Pᵀ`,
/// `M ← (I + (lr/2)·A)⁻¹·(I − (lr/2)·A)·M`. If the left factor is singular the
/// step is retried with half the learning rate.
pub fn cayley_step(m: &DenseMatrix, grad: &DenseMatrix, lr: f64, state: &mut CayleyState) -> Result<DenseMatrix> {
    let d = m.rows();
    if grad.shape() != (d, d) {
        return Err(Error::shape("cayley step", m.shape(), grad.shape()));
    }
    let mut p = state.momentum.scale(state.beta);
    p.axpy(1.0, grad);
    state.momentum = p;
    let p = &state.momentum;
    let a = p.mul_nt(m).sub(&m.mul_nt(p))?;

    let mut h = lr / 2.0;
    for _ in 0..30 {
        let mut left = DenseMatrix::identity(d);
        left.axpy(h, &a);
        let mut right = DenseMatrix::identity(d);
        right.axpy(-h, &a);
        match decomp::Lu::factor(&left) {
            Ok(lu) => return lu.solve(&right.mul(m)),
            Err(Error::Singular { .. }) => h /= 2.0,
            Err(e) => return Err(e),
        }
    }
    Err(Error::Singular { block: None })
}

/// Q factor of `m` (positive `R` diagonal); removes roundoff drift.
pub fn reorthonormalize(m: &DenseMatrix) -> Result<DenseMatrix> {
    Ok(decomp::qr(m)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedTracePoint {
    pub iteration: usize,
    pub pseudo_loss: f64,
    /// `None` when the iterate was singular and PQE was skipped.
    pub relative_pqe: Option<f64>,
    pub orth_penalty: f64,
    /// `‖MMᵀ − I‖_F` at the checkpoint, before any re-orthonormalization.
    pub orth_error: f64,
    pub min_sigma: f64,
    pub max_sigma: f64,
}

#[derive(Debug, Clone)]
pub struct PairedOutcome {
    pub transform: PairedTransform,
    pub trace: Vec<PairedTracePoint>,
    pub initial_relative_pqe: f64,
}

/// Relative PQE of the pair after transforming by `M` and quantizing `U` and
/// `V` independently. Falls back to absolute PQE for a zero product.
pub fn transformed_relative_pqe(
    w1: &DenseMatrix,
    w2: &DenseMatrix,
    t: &PairedTransform,
    qcfg: &QuantConfig,
) -> Result<f64> {
    let (u, v) = t.apply(w1, w2)?;
    let uh = quantize(&u, qcfg)?.dequantize();
    let vh = quantize(&v, &qcfg.transposed())?.dequantize();
    let exact = w1.mul(w2);
    let err = uh.mul(&vh).sub(&exact)?.frobenius();
    let norm = exact.frobenius();
    Ok(if norm > 0.0 { err / norm } else { err })
}

fn initial_matrix(d: usize, init: PairedInit, seed: Seed) -> Result<DenseMatrix> {
    match init {
        PairedInit::Identity => Ok(DenseMatrix::identity(d)),
        PairedInit::RandomRotation => random_rotation(d, seed),
        PairedInit::Hadamard => randomized_hadamard(d, seed),
    }
}

/// Learns `M` for the pair and returns the checkpoint with the lowest relative PQE.
///
/// Every `checkpoint_every` steps (and at the first and last step) the current
/// iterate is scored by quantizing `U` and `V` with `cfg.track_quant`. The
/// starting point is a checkpoint too, so the result is never worse than the
/// initialization.
pub fn optimize_paired(
    w1: &DenseMatrix,
    w2: &DenseMatrix,
    cfg: &PairedOptConfig,
    kind: PairedLossKind,
    seed: Seed,
) -> Result<PairedOutcome> {
    cfg.validate()?;
    kind.validate()?;
    let d = w1.cols();
    let mut m = initial_matrix(d, cfg.init, seed)?;
    check_pair(w1, w2, &m)?;

    enum Stepper {
        Adam(Adam),
        Cayley { lr: f64, state: CayleyState },
    }
    let (mut stepper, lambda) = match cfg.optimizer {
        PairedOptimizer::Adam(a) => (Stepper::Adam(Adam::new(a, d * d)), cfg.lambda_orth),
        PairedOptimizer::CayleySgd { lr, momentum } => (
            Stepper::Cayley {
                lr,
                state: CayleyState::new(d, momentum),
            },
            0.0,
        ),
    };

    let mut trace = Vec::new();
    let mut best: Option<(f64, usize, DenseMatrix, f64)> = None;
    let mut initial_pqe = f64::NAN;
    for it in 0..=cfg.iterations {
        let (loss, grad) = match paired_objective(w1, w2, &m, kind, lambda) {
            Ok(v) => v,
            Err(Error::Singular { .. }) | Err(Error::NonFinite(_)) => {
                return Err(Error::Divergence {
                    iteration: it,
                    block: None,
                })
            }
            Err(e) => return Err(e),
        };
        let checkpoint = it % cfg.checkpoint_every == 0 || it == cfg.iterations;
        if checkpoint {
            let orth_error = m.orthogonality_error();
            let sigma = svd(&m)?;
            let pqe = PairedTransform::from_matrix(m.clone())
                .ok()
                .map(|t| transformed_relative_pqe(w1, w2, &t, &cfg.track_quant))
                .transpose()?;
            if it == 0 {
                initial_pqe = pqe.unwrap_or(f64::NAN);
            }
            trace.push(PairedTracePoint {
                iteration: it,
                pseudo_loss: loss,
                relative_pqe: pqe,
                orth_penalty: orth_error / (d as f64).sqrt(),
                orth_error,
                min_sigma: sigma.min_singular_value(),
                max_sigma: sigma.max_singular_value(),
            });
            if let Some(p) = pqe {
                if best.as_ref().map_or(true, |b| p < b.0) {
                    best = Some((p, it, m.clone(), loss));
                }
            }
        }
        if it == cfg.iterations {
            break;
        }
        match &mut stepper {
            Stepper::Adam(adam) => adam.step(&mut m, &grad),
            Stepper::Cayley { lr, state } => {
                // Drift is recorded at the checkpoint above, then removed.
                if checkpoint && it > 0 {
                    m = reorthonormalize(&m)?;
                }
                m = cayley_step(&m, &grad, *lr, state)?;
            }
        }
    }

    let (pqe, best_it, best_m, best_loss) = best.ok_or(Error::Singular { block: None })?;
    let mut transform = PairedTransform::from_matrix(best_m)?;
    let sigma = svd(transform.matrix())?;
    if sigma.max_singular_value() > SIGMA_WARN_THRESHOLD {
        warn!(
            "learned paired transform has extreme singular value {:.3e}",
            sigma.max_singular_value()
        );
    }
    transform.provenance = Some(Provenance {
        loss: kind,
        optimizer: cfg.optimizer,
        lambda_orth: lambda,
        iterations: cfg.iterations,
        best_iteration: best_it,
        final_pseudo_loss: best_loss,
        final_relative_pqe: pqe,
        min_sigma: sigma.min_singular_value(),
        max_sigma: sigma.max_singular_value(),
    });
    Ok(PairedOutcome {
        transform,
        trace,
        initial_relative_pqe: initial_pqe,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::random::gaussian_matrix;

    fn pair(d1: usize, d2: usize, d3: usize, seed: u64) -> (DenseMatrix, DenseMatrix) {
        let mut rng = Seed(seed).rng();
        (gaussian_matrix(d1, d2, &mut rng), gaussian_matrix(d2, d3, &mut rng))
    }

    fn finite_difference(w1: &DenseMatrix, w2: &DenseMatrix, m: &DenseMatrix, kind: PairedLossKind, lambda: f64) {
        let (_, grad) = paired_objective(w1, w2, m, kind, lambda).unwrap();
        let h = 1e-6;
        let d = m.rows();
        for i in 0..d {
            for j in 0..d {
                let mut plus = m.clone();
                plus[(i, j)] += h;
                let mut minus = m.clone();
                minus[(i, j)] -= h;
                let fp = paired_objective(w1, w2, &plus, kind, lambda).unwrap().0;
                let fm = paired_objective(w1, w2, &minus, kind, lambda).unwrap().0;
                let numeric = (fp - fm) / (2.0 * h);
                let scale = 1.0_f64.max(grad[(i, j)].abs());
                assert!(
                    (numeric - grad[(i, j)]).abs() < 1e-5 * scale,
                    "{kind:?} ({i},{j}): numeric {numeric} analytic {}",
                    grad[(i, j)]
                );
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (w1, w2) = pair(5, 4, 6, 3);
        let m = random_rotation(4, Seed(9)).unwrap().add(&DenseMatrix::identity(4).scale(0.3)).unwrap();
        for kind in [PairedLossKind::LogSumExp { t: 5.0 }, PairedLossKind::SumSq, PairedLossKind::SumSqWted] {
            finite_difference(&w1, &w2, &m, kind, 0.0);
            finite_difference(&w1, &w2, &m, kind, 0.7);
        }
    }

    #[test]
    fn log_sum_exp_is_overflow_safe() {
        let (v, p) = log_sum_exp(&[1000.0, 1000.0], 5.0);
        assert!((v - (1000.0 + 2f64.ln() / 5.0)).abs() < 1e-9);
        assert!((p[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn sum_sq_on_identity() {
        let w1 = DenseMatrix::from_rows(&[[1.0, -3.0], [2.0, 0.5]]).unwrap();
        let w2 = DenseMatrix::from_rows(&[[4.0], [-1.0]]).unwrap();
        let loss = paired_pseudo_loss(&w1, &w2, &DenseMatrix::identity(2), PairedLossKind::SumSq).unwrap();
        assert!((loss - ((9.0 + 4.0) / 2.0 + 16.0)).abs() < 1e-12);
    }

    #[test]
    fn orth_penalty_vanishes_on_rotations() {
        let r = random_rotation(8, Seed(1)).unwrap();
        assert!(orth_penalty(&r) < 1e-12);
        assert_eq!(orth_penalty_grad(&DenseMatrix::identity(3)), DenseMatrix::zeros(3, 3));
        assert!((orth_penalty(&DenseMatrix::identity(4).scale(2.0)) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn transform_preserves_the_product() {
        let (w1, w2) = pair(6, 5, 3, 2);
        let m = random_rotation(5, Seed(4)).unwrap().scale(1.7);
        let t = PairedTransform::from_matrix(m).unwrap();
        let (u, v) = t.apply(&w1, &w2).unwrap();
        assert!(u.mul(&v).max_abs_diff(&w1.mul(&w2)) < 1e-12);
    }

    #[test]
    fn cayley_stays_orthogonal() {
        let (w1, w2) = pair(8, 6, 8, 5);
        let mut m = random_rotation(6, Seed(2)).unwrap();
        let mut state = CayleyState::new(6, 0.1);
        for _ in 0..50 {
            let g = paired_grad(&w1, &w2, &m, PairedLossKind::default(), 0.0).unwrap();
            m = cayley_step(&m, &g, 0.05, &mut state).unwrap();
        }
        assert!(m.orthogonality_error() < 1e-10);
    }

    #[test]
    fn learning_never_worsens_tracked_pqe() {
        let (w1, w2) = pair(16, 8, 16, 11);
        let cfg = PairedOptConfig {
            iterations: 300,
            checkpoint_every: 50,
            optimizer: PairedOptimizer::Adam(AdamConfig::new(1e-2).with_beta1(0.1)),
            ..Default::default()
        };
        let out = optimize_paired(&w1, &w2, &cfg, PairedLossKind::default(), Seed(0)).unwrap();
        let prov = out.transform.provenance.clone().unwrap();
        assert!(prov.final_relative_pqe <= out.initial_relative_pqe);
        assert_eq!(out.trace.len(), 7);
        let direct = transformed_relative_pqe(&w1, &w2, &out.transform, &cfg.track_quant).unwrap();
        assert!((direct - prov.final_relative_pqe).abs() < 1e-9);
    }

    #[test]
    fn cayley_optimization_runs() {
        let (w1, w2) = pair(12, 8, 12, 6);
        let cfg = PairedOptConfig {
            iterations: 120,
            checkpoint_every: 40,
            optimizer: PairedOptimizer::CayleySgd { lr: 0.01, momentum: 0.1 },
            ..Default::default()
        };
        let out = optimize_paired(&w1, &w2, &cfg, PairedLossKind::default(), Seed(0)).unwrap();
        assert!(out.trace.iter().all(|p| p.orth_error < 1e-8));
        assert!(out.transform.matrix().orthogonality_error() < 1e-8);
    }

    #[test]
    fn rejects_mismatched_shapes() {
        let (w1, _) = pair(4, 3, 2, 0);
        let (_, w2) = pair(4, 5, 2, 0);
        assert!(matches!(
            paired_pseudo_loss(&w1, &w2, &DenseMatrix::identity(3), PairedLossKind::SumSq),
            Err(Error::Shape { .. })
        ));
        let bad = PairedOptConfig {
            optimizer: PairedOptimizer::CayleySgd { lr: 0.1, momentum: 1.5 },
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
