//! Scalar uniform quantization with per-tensor, per-channel and subchannel
//! grouping, plus the error metrics the optimizers are judged by.
//!
//! Each group `g` shares a minimum `min_g` and a step `s_g = (max_g − min_g)/(2^N − 1)`.
//! A weight is stored as the integer code `round((w − min_g)/s_g)` and decoded
//! as `s_g·code + min_g`. Groups whose range is zero store `s_g = 0` and code 0.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Axis, DenseMatrix, Seed};

/// Which weights share a `(scale, min)` pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Granularity {
    PerTensor,
    /// One group per channel; `Axis::Rows` makes every row a group.
    PerChannel { axis: Axis },
    /// Channels split into consecutive blocks of `block_size` weights.
    Subchannel { axis: Axis, block_size: usize },
}

impl Granularity {
    /// Same grouping with channels running the other way.
    pub fn transposed(self) -> Granularity {
        match self {
            Granularity::PerTensor => Granularity::PerTensor,
            Granularity::PerChannel { axis } => Granularity::PerChannel {
                axis: axis.flipped(),
            },
            Granularity::Subchannel { axis, block_size } => Granularity::Subchannel {
                axis: axis.flipped(),
                block_size,
            },
        }
    }

    pub fn label(&self) -> String {
        match self {
            Granularity::PerTensor => "per_tensor".into(),
            Granularity::PerChannel { .. } => "per_channel".into(),
            Granularity::Subchannel { block_size, .. } => format!("subchannel_{block_size}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Rounding {
    Nearest,
    Stochastic { seed: Seed },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantConfig {
    pub bits: u8,
    pub granularity: Granularity,
    pub rounding: Rounding,
    /// Round group minima and scales to `f32` before encoding, so the stored
    /// artifact decodes to exactly the grid the codes were chosen on.
    #[serde(default)]
    pub f32_params: bool,
}

impl QuantConfig {
    pub fn new(bits: u8, granularity: Granularity) -> Self {
        Self {
            bits,
            granularity,
            rounding: Rounding::Nearest,
            f32_params: false,
        }
    }

    pub fn per_tensor(bits: u8) -> Self {
        Self::new(bits, Granularity::PerTensor)
    }

    pub fn per_channel(bits: u8, axis: Axis) -> Self {
        Self::new(bits, Granularity::PerChannel { axis })
    }

    pub fn subchannel(bits: u8, axis: Axis, block_size: usize) -> Self {
        Self::new(bits, Granularity::Subchannel { axis, block_size })
    }

    pub fn with_rounding(mut self, rounding: Rounding) -> Self {
        self.rounding = rounding;
        self
    }

    pub fn stochastic(self, seed: Seed) -> Self {
        self.with_rounding(Rounding::Stochastic { seed })
    }

    pub fn with_f32_params(mut self, on: bool) -> Self {
        self.f32_params = on;
        self
    }

    /// Config for the partner matrix whose channels run the other way.
    pub fn transposed(self) -> Self {
        Self {
            granularity: self.granularity.transposed(),
            ..self
        }
    }

    /// Largest code, `2^N − 1`.
    pub fn levels(&self) -> u32 {
        (1u32 << self.bits) - 1
    }

    pub fn validate(&self, rows: usize, cols: usize) -> Result<()> {
        if !(1..=8).contains(&self.bits) {
            return Err(Error::Config(format!(
                "bit width must be in [1, 8], got {}",
                self.bits
            )));
        }
        if let Granularity::Subchannel { axis, block_size } = self.granularity {
            let len = match axis {
                Axis::Rows => cols,
                Axis::Cols => rows,
            };
            if block_size == 0 || len % block_size != 0 {
                return Err(Error::Config(format!(
                    "subchannel block size {block_size} does not divide channel length {len}"
                )));
            }
        }
        Ok(())
    }
}

/// Maps matrix positions to group indices.
#[derive(Debug, Clone, Copy)]
pub struct GroupLayout {
    rows: usize,
    cols: usize,
    granularity: Granularity,
}

impl GroupLayout {
    pub fn new(rows: usize, cols: usize, granularity: Granularity) -> Self {
        Self {
            rows,
            cols,
            granularity,
        }
    }

    pub fn count(&self) -> usize {
        match self.granularity {
            Granularity::PerTensor => 1,
            Granularity::PerChannel { axis: Axis::Rows } => self.rows,
            Granularity::PerChannel { axis: Axis::Cols } => self.cols,
            Granularity::Subchannel { block_size, .. } => self.rows * self.cols / block_size,
        }
    }

    #[inline]
    pub fn group_of(&self, r: usize, c: usize) -> usize {
        match self.granularity {
            Granularity::PerTensor => 0,
            Granularity::PerChannel { axis: Axis::Rows } => r,
            Granularity::PerChannel { axis: Axis::Cols } => c,
            Granularity::Subchannel {
                axis: Axis::Rows,
                block_size,
            } => r * (self.cols / block_size) + c / block_size,
            Granularity::Subchannel {
                axis: Axis::Cols,
                block_size,
            } => c * (self.rows / block_size) + r / block_size,
        }
    }

    /// Per-group `(min, max)` of `w`.
    pub fn ranges(&self, w: &DenseMatrix) -> Vec<(f64, f64)> {
        let mut out = vec![(f64::INFINITY, f64::NEG_INFINITY); self.count()];
        for r in 0..self.rows {
            for (c, &v) in w.row(r).iter().enumerate() {
                let g = &mut out[self.group_of(r, c)];
                g.0 = g.0.min(v);
                g.1 = g.1.max(v);
            }
        }
        out
    }
}

/// Integer codes plus per-group decoding parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedMatrix {
    rows: usize,
    cols: usize,
    config: QuantConfig,
    codes: Vec<u8>,
    group_min: Vec<f64>,
    group_scale: Vec<f64>,
}

impl QuantizedMatrix {
    /// Reassembles a quantized matrix, checking every stated invariant.
    pub fn from_parts(
        rows: usize,
        cols: usize,
        config: QuantConfig,
        codes: Vec<u8>,
        group_min: Vec<f64>,
        group_scale: Vec<f64>,
    ) -> Result<Self> {
        config.validate(rows, cols)?;
        let groups = GroupLayout::new(rows, cols, config.granularity).count();
        if codes.len() != rows * cols {
            return Err(Error::Format(format!(
                "expected {} codes, found {}",
                rows * cols,
                codes.len()
            )));
        }
        if group_min.len() != groups || group_scale.len() != groups {
            return Err(Error::Format(format!(
                "expected {groups} groups, found {} minima and {} scales",
                group_min.len(),
                group_scale.len()
            )));
        }
        let max_code = config.levels();
        if let Some(c) = codes.iter().find(|&&c| c as u32 > max_code) {
            return Err(Error::Format(format!("code {c} exceeds {max_code}")));
        }
        if group_scale.iter().any(|s| !(s.is_finite() && *s >= 0.0))
            || group_min.iter().any(|m| !m.is_finite())
        {
            return Err(Error::Format("invalid group parameters".into()));
        }
        Ok(Self {
            rows,
            cols,
            config,
            codes,
            group_min,
            group_scale,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn config(&self) -> &QuantConfig {
        &self.config
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn group_min(&self) -> &[f64] {
        &self.group_min
    }

    pub fn group_scale(&self) -> &[f64] {
        &self.group_scale
    }

    pub fn layout(&self) -> GroupLayout {
        GroupLayout::new(self.rows, self.cols, self.config.granularity)
    }

    pub fn dequantize(&self) -> DenseMatrix {
        dequantize(self)
    }
}

/// Quantizes `w`, dispatching on `cfg.rounding`.
pub fn quantize(w: &DenseMatrix, cfg: &QuantConfig) -> Result<QuantizedMatrix> {
    match cfg.rounding {
        Rounding::Nearest => encode(w, cfg, None),
        Rounding::Stochastic { seed } => encode(w, cfg, Some(seed)),
    }
}

/// Unbiased stochastic rounding; `cfg.rounding` must be `Stochastic`.
pub fn quantize_stochastic(w: &DenseMatrix, cfg: &QuantConfig) -> Result<QuantizedMatrix> {
    match cfg.rounding {
        Rounding::Stochastic { seed } => encode(w, cfg, Some(seed)),
        Rounding::Nearest => Err(Error::Config(
            "quantize_stochastic requires stochastic rounding".into(),
        )),
    }
}

fn encode(w: &DenseMatrix, cfg: &QuantConfig, stochastic: Option<Seed>) -> Result<QuantizedMatrix> {
    let (rows, cols) = w.shape();
    cfg.validate(rows, cols)?;
    let layout = GroupLayout::new(rows, cols, cfg.granularity);
    let levels = cfg.levels() as f64;

    let mut group_min = Vec::with_capacity(layout.count());
    let mut group_scale = Vec::with_capacity(layout.count());
    for (lo, hi) in layout.ranges(w) {
        let (m, s) = if cfg.f32_params {
            f32_grid(lo, hi, levels)
        } else {
            (lo, (hi - lo) / levels)
        };
        group_min.push(m);
        group_scale.push(s);
    }

    let mut rng = stochastic.map(Seed::rng);
    let mut codes = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for (c, &v) in w.row(r).iter().enumerate() {
            let g = layout.group_of(r, c);
            let s = group_scale[g];
            // One draw per element keeps the stream aligned with row-major order.
            let u = rng.as_mut().map(|rng| rng.random::<f64>());
            if s == 0.0 {
                codes.push(0);
                continue;
            }
            let x = ((v - group_min[g]) / s).clamp(0.0, levels);
            let code = match u {
                None => (x + 0.5).floor(),
                Some(u) => {
                    let f = x.floor();
                    if u < x - f {
                        f + 1.0
                    } else {
                        f
                    }
                }
            };
            codes.push(code.min(levels) as u8);
        }
    }
    Ok(QuantizedMatrix {
        rows,
        cols,
        config: *cfg,
        codes,
        group_min,
        group_scale,
    })
}

/// Picks an `f32` minimum and step such that decoding the top code and
/// re-deriving the step reproduces the same `f32` step.
fn f32_grid(lo: f64, hi: f64, levels: f64) -> (f64, f64) {
    let min = lo as f32 as f64;
    if hi <= lo {
        return (min, 0.0);
    }
    let mut s = ((hi - min) / levels) as f32 as f64;
    for _ in 0..8 {
        let top = (s * levels + min) as f32 as f64;
        let again = ((top - min) / levels) as f32 as f64;
        if again == s {
            break;
        }
        s = again;
    }
    (min, s)
}

pub fn dequantize(q: &QuantizedMatrix) -> DenseMatrix {
    let layout = q.layout();
    let mut data = Vec::with_capacity(q.codes.len());
    for r in 0..q.rows {
        for c in 0..q.cols {
            let g = layout.group_of(r, c);
            data.push(q.group_scale[g] * q.codes[r * q.cols + c] as f64 + q.group_min[g]);
        }
    }
    DenseMatrix::from_raw(q.rows, q.cols, data)
}

/// `‖w − ŵ‖_F / ‖w‖_F`.
pub fn relative_error(w: &DenseMatrix, w_hat: &DenseMatrix) -> Result<f64> {
    let norm = w.frobenius();
    if norm == 0.0 {
        return Err(Error::Domain("relative error of a zero matrix".into()));
    }
    Ok(w.sub(w_hat)?.frobenius() / norm)
}

/// Paired quantization error `‖Ŵ₁Ŵ₂ − W₁W₂‖_F`.
pub fn pqe(
    w1: &DenseMatrix,
    w2: &DenseMatrix,
    w1_hat: &DenseMatrix,
    w2_hat: &DenseMatrix,
) -> Result<f64> {
    let exact = w1.matmul(w2)?;
    let approx = w1_hat.matmul(w2_hat)?;
    Ok(approx.sub(&exact)?.frobenius())
}

/// PQE divided by `‖W₁W₂‖_F`.
pub fn relative_pqe(
    w1: &DenseMatrix,
    w2: &DenseMatrix,
    w1_hat: &DenseMatrix,
    w2_hat: &DenseMatrix,
) -> Result<f64> {
    let exact = w1.matmul(w2)?;
    let norm = exact.frobenius();
    if norm == 0.0 {
        return Err(Error::Domain("relative PQE of a zero product".into()));
    }
    let approx = w1_hat.matmul(w2_hat)?;
    Ok(approx.sub(&exact)?.frobenius() / norm)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundViolation {
    pub row: usize,
    pub col: usize,
    pub error: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport {
    pub checked: usize,
    pub violations: usize,
    /// Largest `error − bound` seen, violating or not.
    pub worst: Option<BoundViolation>,
}

impl BoundReport {
    pub fn holds(&self) -> bool {
        self.violations == 0
    }
}

/// Absolute slack added to the per-element rounding bound.
pub const BOUND_SLACK: f64 = 1e-12;

/// Checks `|w − ŵ| ≤ (max_g − min_g)/(2(2^N − 1))` element by element, with
/// group ranges taken from `w` itself.
pub fn elementwise_error_bound(q: &QuantizedMatrix, w: &DenseMatrix) -> BoundReport {
    let layout = q.layout();
    let ranges = layout.ranges(w);
    let levels = q.config.levels() as f64;
    let w_hat = dequantize(q);
    let mut report = BoundReport {
        checked: 0,
        violations: 0,
        worst: None,
    };
    let mut worst_gap = f64::NEG_INFINITY;
    for r in 0..w.rows() {
        for c in 0..w.cols() {
            let (lo, hi) = ranges[layout.group_of(r, c)];
            let bound = (hi - lo) / (2.0 * levels);
            let error = (w[(r, c)] - w_hat[(r, c)]).abs();
            report.checked += 1;
            if error > bound + BOUND_SLACK {
                report.violations += 1;
            }
            if error - bound > worst_gap {
                worst_gap = error - bound;
                report.worst = Some(BoundViolation {
                    row: r,
                    col: c,
                    error,
                    bound,
                });
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toy() -> DenseMatrix {
        DenseMatrix::from_rows(&[[1.0, 0.0], [0.0, 0.6]]).unwrap()
    }

    #[test]
    fn one_bit_toy_rounds_to_identity() {
        let q = quantize(&toy(), &QuantConfig::per_tensor(1)).unwrap();
        assert_eq!(q.codes(), &[1, 0, 0, 1]);
        assert_eq!(q.dequantize(), DenseMatrix::identity(2));
    }

    #[test]
    fn one_bit_squared_toy_drops_small_entry() {
        let w = DenseMatrix::from_rows(&[[1.0, 0.0], [0.0, 0.36]]).unwrap();
        let q = quantize(&w, &QuantConfig::per_tensor(1)).unwrap();
        assert_eq!(q.dequantize().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn constant_group_is_exact() {
        let w = DenseMatrix::from_rows(&[[2.5, 2.5, 2.5], [1.0, 2.0, 3.0]]).unwrap();
        for bits in 1..=8 {
            let q = quantize(&w, &QuantConfig::per_channel(bits, Axis::Rows)).unwrap();
            assert_eq!(&q.codes()[..3], &[0, 0, 0]);
            assert_eq!(q.group_scale()[0], 0.0);
            assert_eq!(q.dequantize().row(0), &[2.5, 2.5, 2.5]);
            let report = elementwise_error_bound(&q, &w);
            assert!(report.holds());
        }
    }

    #[test]
    fn ties_round_up() {
        // range [0, 2] at 1 bit: step 2, so 1.0 sits exactly halfway.
        let w = DenseMatrix::from_rows(&[[0.0, 1.0, 2.0]]).unwrap();
        let q = quantize(&w, &QuantConfig::per_tensor(1)).unwrap();
        assert_eq!(q.codes(), &[0, 1, 1]);
    }

    #[test]
    fn eight_bit_bound_on_range_255() {
        let w = DenseMatrix::from_fn(1, 256, |_, c| if c == 255 { 255.0 } else { (c as f64 * 1.37) % 255.0 });
        let q = quantize(&w, &QuantConfig::per_tensor(8)).unwrap();
        let report = elementwise_error_bound(&q, &w);
        assert!(report.holds());
        assert!((report.worst.unwrap().bound - 0.5).abs() < 1e-12);
    }

    #[test]
    fn subchannel_block_must_divide() {
        let w = DenseMatrix::zeros(2, 6);
        assert!(quantize(&w, &QuantConfig::subchannel(4, Axis::Rows, 4)).is_err());
        assert!(quantize(&w, &QuantConfig::subchannel(4, Axis::Rows, 3)).is_ok());
        assert!(quantize(&w, &QuantConfig::subchannel(4, Axis::Cols, 2)).is_ok());
        assert!(quantize(&w, &QuantConfig::per_tensor(0)).is_err());
        assert!(quantize(&w, &QuantConfig::per_tensor(9)).is_err());
    }

    #[test]
    fn group_layout_counts() {
        let g = |gran| GroupLayout::new(4, 6, gran).count();
        assert_eq!(g(Granularity::PerTensor), 1);
        assert_eq!(g(Granularity::PerChannel { axis: Axis::Rows }), 4);
        assert_eq!(g(Granularity::PerChannel { axis: Axis::Cols }), 6);
        assert_eq!(g(Granularity::Subchannel { axis: Axis::Rows, block_size: 3 }), 8);
        assert_eq!(g(Granularity::Subchannel { axis: Axis::Cols, block_size: 2 }), 12);
    }

    #[test]
    fn stochastic_needs_stochastic_config() {
        assert!(quantize_stochastic(&toy(), &QuantConfig::per_tensor(2)).is_err());
    }

    #[test]
    fn stochastic_integer_points_are_deterministic() {
        // Grid 0, 1/3, 2/3, 1 at 2 bits: every entry is a level.
        let w = DenseMatrix::from_rows(&[[0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]]).unwrap();
        for s in 0..50 {
            let cfg = QuantConfig::per_tensor(2).stochastic(Seed(s));
            let q = quantize_stochastic(&w, &cfg).unwrap();
            assert_eq!(q.codes(), &[0, 1, 2, 3]);
        }
    }

    #[test]
    fn stochastic_frequency_matches_fraction() {
        // w = 0.6 in a group spanning [0, 1] at one bit.
        let w = DenseMatrix::from_rows(&[[0.0, 0.6, 1.0]]).unwrap();
        let draws = 100_000;
        let mut ones = 0usize;
        for s in 0..draws {
            let cfg = QuantConfig::per_tensor(1).stochastic(Seed(s));
            ones += quantize_stochastic(&w, &cfg).unwrap().codes()[1] as usize;
        }
        let p = 0.6;
        let sigma = (p * (1.0 - p) / draws as f64).sqrt();
        let freq = ones as f64 / draws as f64;
        assert!((freq - p).abs() <= 3.0 * sigma, "freq {freq}");
    }

    #[test]
    fn relative_error_examples() {
        let w = toy();
        assert_eq!(relative_error(&w, &w).unwrap(), 0.0);
        let e = relative_error(&w, &DenseMatrix::identity(2)).unwrap();
        assert!((e - 0.4 / 1.36f64.sqrt()).abs() < 1e-12);
        assert!((e - 0.3430).abs() < 1e-4);
        let e2 = relative_error(&w.scale(2.0), &DenseMatrix::identity(2).scale(2.0)).unwrap();
        assert!((e - e2).abs() < 1e-15);
        assert!(relative_error(&DenseMatrix::zeros(2, 2), &w).is_err());
    }

    #[test]
    fn pqe_examples() {
        let w = toy();
        let i = DenseMatrix::identity(2);
        assert!((pqe(&w, &w, &i, &i).unwrap() - 0.64).abs() < 1e-12);
        let w2_hat = DenseMatrix::from_diag(&[1.0, 0.0]);
        assert!((pqe(&w, &w, &i, &w2_hat).unwrap() - 0.36).abs() < 1e-12);
        assert_eq!(pqe(&w, &w, &w, &w).unwrap(), 0.0);
        assert!(pqe(&w, &DenseMatrix::zeros(3, 2), &w, &w).is_err());
    }

    #[test]
    fn f32_params_decode_exactly_in_f32() {
        let w = DenseMatrix::from_fn(3, 17, |r, c| ((r * 17 + c) as f64 * 0.731).sin() * 3.0);
        let cfg = QuantConfig::per_channel(4, Axis::Rows).with_f32_params(true);
        let q = quantize(&w, &cfg).unwrap();
        for (&m, &s) in q.group_min().iter().zip(q.group_scale()) {
            assert_eq!(m, m as f32 as f64);
            assert_eq!(s, s as f32 as f64);
        }
        let back = q.dequantize().rounded_to_f32();
        let again = quantize(&back, &cfg).unwrap();
        assert_eq!(again, q);
    }

    fn granularity_strategy(rows: usize, cols: usize) -> impl Strategy<Value = Granularity> {
        let row_blocks: Vec<usize> = (1..=cols).filter(|b| cols % b == 0).collect();
        let col_blocks: Vec<usize> = (1..=rows).filter(|b| rows % b == 0).collect();
        prop_oneof![
            Just(Granularity::PerTensor),
            Just(Granularity::PerChannel { axis: Axis::Rows }),
            Just(Granularity::PerChannel { axis: Axis::Cols }),
            proptest::sample::select(row_blocks)
                .prop_map(|b| Granularity::Subchannel { axis: Axis::Rows, block_size: b }),
            proptest::sample::select(col_blocks)
                .prop_map(|b| Granularity::Subchannel { axis: Axis::Cols, block_size: b }),
        ]
    }

    fn case() -> impl Strategy<Value = (DenseMatrix, QuantConfig)> {
        (1usize..=24, 1usize..=24, 1u8..=8).prop_flat_map(|(r, c, bits)| {
            (
                proptest::collection::vec(-50.0f64..50.0, r * c),
                granularity_strategy(r, c),
            )
                .prop_map(move |(data, g)| {
                    (DenseMatrix::new(r, c, data).unwrap(), QuantConfig::new(bits, g))
                })
        })
    }

    proptest! {
        #[test]
        fn nearest_rounding_obeys_bound((w, cfg) in case()) {
            let q = quantize(&w, &cfg).unwrap();
            prop_assert!(q.codes().iter().all(|&c| (c as u32) <= cfg.levels()));
            prop_assert!(q.group_scale().iter().all(|&s| s >= 0.0));
            let report = elementwise_error_bound(&q, &w);
            prop_assert!(report.holds(), "{:?}", report.worst);
        }

        #[test]
        fn requantizing_dequantized_is_identity_on_codes((w, cfg) in case()) {
            let q = quantize(&w, &cfg).unwrap();
            let again = quantize(&q.dequantize(), &cfg).unwrap();
            prop_assert_eq!(q.codes(), again.codes());
        }

        #[test]
        fn orthogonal_maps_preserve_frobenius(seed in 0u64..1000, d in 1usize..12) {
            let q = crate::linalg::random_rotation(d, Seed(seed)).unwrap();
            let mut rng = Seed(seed + 1).rng();
            let e = crate::linalg::random::gaussian_matrix(d, 5, &mut rng);
            let rotated = q.matmul(&e).unwrap().frobenius();
            prop_assert!((rotated - e.frobenius()).abs() <= 1e-12 * e.frobenius().max(1.0));
        }
    }
}
