//! Built-in correctness checks run by `cfq selfcheck`.

use std::fmt;

use crate::adaptive::{adaptive_round_with, AdaptiveRoundConfig};
use crate::error::Result;
use crate::linalg::random::gaussian_matrix;
use crate::linalg::{random_rotation, Axis, DenseMatrix, Seed};
use crate::paired::{paired_objective, PairedLossKind};
use crate::quant::{elementwise_error_bound, quantize, QuantConfig, QuantizedMatrix};
use crate::single::{block_objective, InfNorm};

pub const TOY_TOLERANCE: f64 = 1e-6;
pub const GRADIENT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelfcheckReport {
    pub checks: Vec<CheckResult>,
}

impl SelfcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

impl fmt::Display for SelfcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail)?;
        }
        Ok(())
    }
}

fn check(name: &'static str, outcome: Result<(bool, String)>) -> CheckResult {
    match outcome {
        Ok((passed, detail)) => CheckResult { name, passed, detail },
        Err(e) => CheckResult {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

fn toy_check<Q>(quantizer: &Q) -> Result<(bool, String)>
where
    Q: Fn(&DenseMatrix, &QuantConfig) -> Result<QuantizedMatrix>,
{
    let w = DenseMatrix::from_rows(&[[1.0, 0.0], [0.0, 0.6]])?;
    let cfg = AdaptiveRoundConfig::with_quantizer(0, QuantConfig::per_tensor(1));
    let out = adaptive_round_with(&w, &w, &cfg, quantizer)?;
    let ok = (out.independent_pqe - 0.64).abs() <= TOY_TOLERANCE && (out.pqe - 0.36).abs() <= TOY_TOLERANCE;
    Ok((
        ok,
        format!("independent PQE {:.6}, adaptive PQE {:.6}", out.independent_pqe, out.pqe),
    ))
}

fn bound_check<Q>(quantizer: &Q) -> Result<(bool, String)>
where
    Q: Fn(&DenseMatrix, &QuantConfig) -> Result<QuantizedMatrix>,
{
    let mut rng = Seed(0x5e1f).rng();
    let mut checked = 0;
    let mut violations = 0;
    for bits in 1..=8u8 {
        for (i, gran) in [
            QuantConfig::per_tensor(bits),
            QuantConfig::per_channel(bits, Axis::Rows),
            QuantConfig::per_channel(bits, Axis::Cols),
            QuantConfig::subchannel(bits, Axis::Rows, 4),
        ]
        .into_iter()
        .enumerate()
        {
            let w = gaussian_matrix(8 + i * 4, 16, &mut rng).scale(1.0 + bits as f64);
            let q = quantizer(&w, &gran)?;
            let report = elementwise_error_bound(&q, &w);
            checked += report.checked;
            violations += report.violations;
        }
    }
    Ok((violations == 0, format!("{violations} violations over {checked} weights")))
}

fn relative_gap(numeric: f64, analytic: f64) -> f64 {
    (numeric - analytic).abs() / analytic.abs().max(1.0)
}

fn gradient_check() -> Result<(bool, String)> {
    let h = 1e-6;
    let mut worst: f64 = 0.0;

    let mut rng = Seed(0x9ad).rng();
    let block = random_rotation(4, Seed(3))?.add(&DenseMatrix::identity(4).scale(0.5))?;
    let wb = gaussian_matrix(4, 6, &mut rng);
    let c = 6.0 / 225.0;
    let (_, g) = block_objective(&block, &wb, c, InfNorm::ExactSubgradient)?;
    for i in 0..4 {
        for j in 0..4 {
            let mut p = block.clone();
            p[(i, j)] += h;
            let mut m = block.clone();
            m[(i, j)] -= h;
            let fp = block_objective(&p, &wb, c, InfNorm::ExactSubgradient)?.0;
            let fm = block_objective(&m, &wb, c, InfNorm::ExactSubgradient)?.0;
            worst = worst.max(relative_gap((fp - fm) / (2.0 * h), g[(i, j)]));
        }
    }

    let w1 = gaussian_matrix(5, 4, &mut rng);
    let w2 = gaussian_matrix(4, 5, &mut rng);
    // Off the orthogonal group, where the penalty is smooth.
    let m0 = random_rotation(4, Seed(5))?.add(&DenseMatrix::identity(4).scale(0.3))?;
    for kind in [PairedLossKind::LogSumExp { t: 5.0 }, PairedLossKind::SumSq, PairedLossKind::SumSqWted] {
        let (_, g) = paired_objective(&w1, &w2, &m0, kind, 0.1)?;
        for i in 0..4 {
            for j in 0..4 {
                let mut p = m0.clone();
                p[(i, j)] += h;
                let mut m = m0.clone();
                m[(i, j)] -= h;
                let fp = paired_objective(&w1, &w2, &p, kind, 0.1)?.0;
                let fm = paired_objective(&w1, &w2, &m, kind, 0.1)?.0;
                worst = worst.max(relative_gap((fp - fm) / (2.0 * h), g[(i, j)]));
            }
        }
    }
    Ok((worst <= GRADIENT_TOLERANCE, format!("worst relative gap {worst:.2e}")))
}

/// Runs all checks against the given base quantizer.
pub fn run_with<Q>(quantizer: Q) -> SelfcheckReport
where
    Q: Fn(&DenseMatrix, &QuantConfig) -> Result<QuantizedMatrix>,
{
    SelfcheckReport {
        checks: vec![
            check("toy_example", toy_check(&quantizer)),
            check("error_bound", bound_check(&quantizer)),
            check("gradients", gradient_check()),
        ],
    }
}

pub fn run() -> SelfcheckReport {
    run_with(quantize)
}
