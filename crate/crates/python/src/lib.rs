//! Python bindings. Matrices cross the boundary as lists of rows (any nested
//! sequence of floats, including 2-D numpy arrays, is accepted).

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use cfq_core::adaptive::AdaptiveRoundConfig;
use cfq_core::artifact::Artifact;
use cfq_core::optim::AdamConfig;
use cfq_core::paired::{PairedLossKind, PairedOptConfig, PairedOptimizer};
use cfq_core::pipeline::{self, PipelineConfig};
use cfq_core::single::SingleLossConfig;
use cfq_core::{Axis, DenseMatrix, Error, Granularity, Seed};

fn err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        Error::Shape { .. } | Error::Config(_) | Error::Domain(_) | Error::InvalidMatrix(_) | Error::Json(_) => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<DenseMatrix> {
    if rows.is_empty() {
        return Err(PyValueError::new_err("matrix must have at least one row"));
    }
    DenseMatrix::from_rows(&rows).map_err(err)
}

type Rows = Vec<Vec<f64>>;

fn to_rows(m: &DenseMatrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

fn axis(name: &str) -> PyResult<Axis> {
    match name {
        "rows" => Ok(Axis::Rows),
        "cols" => Ok(Axis::Cols),
        _ => Err(PyValueError::new_err(format!("axis must be 'rows' or 'cols', got {name:?}"))),
    }
}

fn json<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Uniform quantizer settings.
#[pyclass(module = "cfq", frozen, skip_from_py_object)]
#[derive(Clone, Copy)]
struct QuantConfig(cfq_core::QuantConfig);

#[pymethods]
impl QuantConfig {
    #[new]
    #[pyo3(signature = (bits=4, granularity="per_channel", axis="rows", block_size=None, f32_params=false))]
    fn new(bits: u8, granularity: &str, axis: &str, block_size: Option<usize>, f32_params: bool) -> PyResult<Self> {
        let a = self::axis(axis)?;
        let g = match (granularity, block_size) {
            ("per_tensor", None) => Granularity::PerTensor,
            ("per_channel", None) => Granularity::PerChannel { axis: a },
            ("subchannel", Some(b)) => Granularity::Subchannel { axis: a, block_size: b },
            ("subchannel", None) => return Err(PyValueError::new_err("subchannel grouping needs block_size")),
            _ => return Err(PyValueError::new_err(format!("unsupported granularity {granularity:?}"))),
        };
        if !(1..=8).contains(&bits) {
            return Err(PyValueError::new_err(format!("bits must be in [1, 8], got {bits}")));
        }
        Ok(Self(cfq_core::QuantConfig::new(bits, g).with_f32_params(f32_params)))
    }

    #[getter]
    fn bits(&self) -> u8 {
        self.0.bits
    }

    #[getter]
    fn granularity(&self) -> String {
        self.0.granularity.label()
    }

    fn transposed(&self) -> Self {
        Self(self.0.transposed())
    }

    fn __repr__(&self) -> String {
        format!("QuantConfig({:?})", self.0)
    }
}

/// Integer codes with per-group minimum and step.
#[pyclass(module = "cfq", frozen)]
struct QuantizedMatrix(cfq_core::QuantizedMatrix);

#[pymethods]
impl QuantizedMatrix {
    #[getter]
    fn shape(&self) -> (usize, usize) {
        self.0.shape()
    }

    #[getter]
    fn codes(&self) -> Vec<u8> {
        self.0.codes().to_vec()
    }

    #[getter]
    fn group_min(&self) -> Vec<f64> {
        self.0.group_min().to_vec()
    }

    #[getter]
    fn group_scale(&self) -> Vec<f64> {
        self.0.group_scale().to_vec()
    }

    #[getter]
    fn config(&self) -> QuantConfig {
        QuantConfig(*self.0.config())
    }

    fn dequantize(&self) -> Vec<Vec<f64>> {
        to_rows(&self.0.dequantize())
    }

    /// Codes bit-packed LSB-first with per-row padding.
    fn packed(&self) -> PyResult<Vec<u8>> {
        let (r, c) = self.0.shape();
        cfq_core::packing::pack(self.0.codes(), r, c, self.0.config().bits).map_err(err)
    }
}

#[pyfunction]
fn quantize(w: Vec<Vec<f64>>, config: PyRef<'_, QuantConfig>) -> PyResult<QuantizedMatrix> {
    Ok(QuantizedMatrix(cfq_core::quantize(&matrix(w)?, &config.0).map_err(err)?))
}

#[pyfunction]
fn quantize_stochastic(w: Vec<Vec<f64>>, config: PyRef<'_, QuantConfig>, seed: u64) -> PyResult<QuantizedMatrix> {
    let cfg = config.0.stochastic(Seed(seed));
    Ok(QuantizedMatrix(cfq_core::quantize_stochastic(&matrix(w)?, &cfg).map_err(err)?))
}

#[pyfunction]
fn relative_error(w: Vec<Vec<f64>>, w_hat: Vec<Vec<f64>>) -> PyResult<f64> {
    cfq_core::relative_error(&matrix(w)?, &matrix(w_hat)?).map_err(err)
}

/// `‖Ŵ₁Ŵ₂ − W₁W₂‖_F`.
#[pyfunction]
fn pqe(w1: Vec<Vec<f64>>, w2: Vec<Vec<f64>>, w1_hat: Vec<Vec<f64>>, w2_hat: Vec<Vec<f64>>) -> PyResult<f64> {
    cfq_core::quant::pqe(&matrix(w1)?, &matrix(w2)?, &matrix(w1_hat)?, &matrix(w2_hat)?).map_err(err)
}

#[pyfunction]
fn extra_flops_percent(transform_dim: usize, block_size: usize, d_in: usize, d_out: usize) -> f64 {
    cfq_core::report::extra_flops_percent(transform_dim, block_size, d_in, d_out)
}

/// Block-diagonal invertible transform acting on the rows of a weight matrix.
#[pyclass(module = "cfq", frozen)]
struct BlockDiagTransform(cfq_core::single::BlockDiagTransform);

#[pymethods]
impl BlockDiagTransform {
    /// Randomized Hadamard blocks (`block_size` a power of two).
    #[staticmethod]
    #[pyo3(signature = (dim, block_size, seed=0))]
    fn hadamard(dim: usize, block_size: usize, seed: u64) -> PyResult<Self> {
        cfq_core::single::BlockDiagTransform::hadamard_blocks(dim, block_size, Seed(seed))
            .map(Self)
            .map_err(err)
    }

    #[getter]
    fn block_size(&self) -> usize {
        self.0.block_size()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn blocks(&self) -> Vec<Vec<Vec<f64>>> {
        self.0.blocks().iter().map(to_rows).collect()
    }

    fn to_dense(&self) -> Vec<Vec<f64>> {
        to_rows(&self.0.to_dense())
    }

    fn apply(&self, w: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(to_rows(&self.0.apply(&matrix(w)?).map_err(err)?))
    }

    fn apply_inverse(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(to_rows(&self.0.apply_inverse(&matrix(x)?).map_err(err)?))
    }

    /// Relative error of `M⁻¹·Q(M·W)` against `W`.
    fn relative_error(&self, w: Vec<Vec<f64>>, config: PyRef<'_, QuantConfig>) -> PyResult<f64> {
        cfq_core::single::transformed_relative_error(&matrix(w)?, &self.0, &config.0).map_err(err)
    }
}

/// Learns a block-diagonal transform; returns `(transform, initial_loss, final_loss)`.
#[pyfunction]
#[pyo3(signature = (w, block_size, iterations=1000, lr=0.01, bits=4, seed=0))]
fn learn_single(
    py: Python<'_>,
    w: Vec<Vec<f64>>,
    block_size: usize,
    iterations: usize,
    lr: f64,
    bits: u8,
    seed: u64,
) -> PyResult<(BlockDiagTransform, f64, f64)> {
    let w = matrix(w)?;
    let cfg = SingleLossConfig {
        bits,
        adam: AdamConfig::new(lr),
        iterations,
        ..SingleLossConfig::default()
    };
    let out = py
        .detach(|| cfq_core::single::optimize_single(&w, block_size, &cfg, Seed(seed)))
        .map_err(err)?;
    Ok((BlockDiagTransform(out.transform), out.initial_loss, out.final_loss))
}

/// Invertible `M` shared by a pair, applied as `(W₁M, M⁻¹W₂)`.
#[pyclass(module = "cfq", frozen)]
struct PairedTransform(cfq_core::paired::PairedTransform);

#[pymethods]
impl PairedTransform {
    #[new]
    fn new(m: Vec<Vec<f64>>) -> PyResult<Self> {
        cfq_core::paired::PairedTransform::from_matrix(matrix(m)?).map(Self).map_err(err)
    }

    fn matrix(&self) -> Vec<Vec<f64>> {
        to_rows(self.0.matrix())
    }

    fn inverse(&self) -> Vec<Vec<f64>> {
        to_rows(self.0.inverse())
    }

    fn apply(&self, w1: Vec<Vec<f64>>, w2: Vec<Vec<f64>>) -> PyResult<(Rows, Rows)> {
        let (u, v) = self.0.apply(&matrix(w1)?, &matrix(w2)?).map_err(err)?;
        Ok((to_rows(&u), to_rows(&v)))
    }

    /// Optimizer settings and outcome as a dict, or `None` if built by hand.
    #[getter]
    fn provenance<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        json(py, &self.0.provenance)
    }
}

/// Learns a paired transform; returns `(transform, initial_relative_pqe, trace)`.
#[pyfunction]
#[pyo3(signature = (
    w1, w2, iterations=2000, loss="lse", t=5.0, optimizer="adam", lr=1e-3, momentum=0.1,
    lambda_orth=0.1, checkpoint_every=100, bits=4, seed=0
))]
#[allow(clippy::too_many_arguments)]
fn learn_paired<'py>(
    py: Python<'py>,
    w1: Vec<Vec<f64>>,
    w2: Vec<Vec<f64>>,
    iterations: usize,
    loss: &str,
    t: f64,
    optimizer: &str,
    lr: f64,
    momentum: f64,
    lambda_orth: f64,
    checkpoint_every: usize,
    bits: u8,
    seed: u64,
) -> PyResult<(PairedTransform, f64, Bound<'py, PyAny>)> {
    let kind = match loss {
        "lse" => PairedLossKind::LogSumExp { t },
        "sum_sq" => PairedLossKind::SumSq,
        "sum_sq_wted" => PairedLossKind::SumSqWted,
        _ => return Err(PyValueError::new_err(format!("unknown loss {loss:?}"))),
    };
    let optimizer = match optimizer {
        "adam" => PairedOptimizer::Adam(AdamConfig::new(lr).with_beta1(momentum)),
        "cayley" => PairedOptimizer::CayleySgd { lr, momentum },
        _ => return Err(PyValueError::new_err(format!("unknown optimizer {optimizer:?}"))),
    };
    let cfg = PairedOptConfig {
        optimizer,
        lambda_orth,
        iterations,
        checkpoint_every,
        track_quant: cfq_core::QuantConfig::per_channel(bits, Axis::Rows),
        ..PairedOptConfig::default()
    };
    let (w1, w2) = (matrix(w1)?, matrix(w2)?);
    let out = py
        .detach(|| cfq_core::paired::optimize_paired(&w1, &w2, &cfg, kind, Seed(seed)))
        .map_err(err)?;
    let trace = json(py, &out.trace)?;
    Ok((PairedTransform(out.transform), out.initial_relative_pqe, trace))
}

/// Adaptive rounding of a pair; returns a dict with the quantized pair and PQEs.
///
/// `config` quantizes `W₁` and its transpose `W₂`; it defaults to per-channel at `bits`.
#[pyfunction]
#[pyo3(signature = (w1, w2, iterations=3, bits=4, transform=None, early_stop=true, config=None))]
#[allow(clippy::too_many_arguments)]
fn adaptive_round<'py>(
    py: Python<'py>,
    w1: Vec<Vec<f64>>,
    w2: Vec<Vec<f64>>,
    iterations: usize,
    bits: u8,
    transform: Option<PyRef<'_, PairedTransform>>,
    early_stop: bool,
    config: Option<PyRef<'_, QuantConfig>>,
) -> PyResult<Bound<'py, PyAny>> {
    let (mut w1, mut w2) = (matrix(w1)?, matrix(w2)?);
    if let Some(t) = transform {
        (w1, w2) = t.0.apply(&w1, &w2).map_err(err)?;
    }
    let q = config.map_or(cfq_core::QuantConfig::per_channel(bits, Axis::Rows), |c| c.0);
    let mut cfg = AdaptiveRoundConfig::with_quantizer(iterations, q);
    cfg.early_stop = early_stop;
    let out = py.detach(|| cfq_core::adaptive::adaptive_round(&w1, &w2, &cfg)).map_err(err)?;
    let d = pyo3::types::PyDict::new(py);
    d.set_item("pqe", out.pqe)?;
    d.set_item("independent_pqe", out.independent_pqe)?;
    d.set_item("best_step", out.best_step)?;
    d.set_item("note", out.note.clone())?;
    d.set_item("trace", json(py, &out.trace)?)?;
    d.set_item("w1", QuantizedMatrix(out.w1))?;
    d.set_item("w2", QuantizedMatrix(out.w2))?;
    Ok(d.into_any())
}

/// Quantizes a manifest into `out_dir` and returns the per-tensor report rows.
///
/// `config` is a JSON document; keyword overrides apply on top of it.
#[pyfunction]
#[pyo3(signature = (manifest, out_dir, config=None, method=None, bits=None, seed=None))]
fn quantize_model<'py>(
    py: Python<'py>,
    manifest: PathBuf,
    out_dir: PathBuf,
    config: Option<&str>,
    method: Option<&str>,
    bits: Option<u8>,
    seed: Option<u64>,
) -> PyResult<Bound<'py, PyAny>> {
    let mut cfg = match config {
        Some(text) => PipelineConfig::from_json(text).map_err(err)?,
        None => PipelineConfig::default(),
    };
    if let Some(m) = method {
        cfg.method = m.parse().map_err(err)?;
    }
    if let Some(b) = bits {
        cfg.quant.bits = b;
        cfg.single.bits = b;
        cfg.paired.track_quant.bits = b;
    }
    if let Some(s) = seed {
        cfg.seed = Seed(s);
    }
    cfg.validate().map_err(err)?;
    let art = py
        .detach(|| pipeline::quantize_to_dir(&manifest, &cfg, &out_dir))
        .map_err(err)?;
    json(py, &art.reports())
}

/// Decodes an artifact to f32 files plus `manifest.json`; returns the tensor count.
#[pyfunction]
#[pyo3(signature = (artifact_dir, out_dir, reverse_paired=false))]
fn reconstruct(artifact_dir: PathBuf, out_dir: PathBuf, reverse_paired: bool) -> PyResult<usize> {
    let art = Artifact::read(&artifact_dir).map_err(err)?;
    let m = art.write_reconstruction(&out_dir, reverse_paired).map_err(err)?;
    Ok(m.tensors.len())
}

/// Runs the built-in checks; returns `(passed, report_text)`.
#[pyfunction]
fn selfcheck() -> (bool, String) {
    let r = cfq_core::selfcheck::run();
    (r.passed(), r.to_string())
}

#[pymodule]
fn cfq(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<QuantConfig>()?;
    m.add_class::<QuantizedMatrix>()?;
    m.add_class::<BlockDiagTransform>()?;
    m.add_class::<PairedTransform>()?;
    m.add_function(wrap_pyfunction!(quantize, m)?)?;
    m.add_function(wrap_pyfunction!(quantize_stochastic, m)?)?;
    m.add_function(wrap_pyfunction!(relative_error, m)?)?;
    m.add_function(wrap_pyfunction!(pqe, m)?)?;
    m.add_function(wrap_pyfunction!(extra_flops_percent, m)?)?;
    m.add_function(wrap_pyfunction!(learn_single, m)?)?;
    m.add_function(wrap_pyfunction!(learn_paired, m)?)?;
    m.add_function(wrap_pyfunction!(adaptive_round, m)?)?;
    m.add_function(wrap_pyfunction!(quantize_model, m)?)?;
    m.add_function(wrap_pyfunction!(reconstruct, m)?)?;
    m.add_function(wrap_pyfunction!(selfcheck, m)?)?;
    Ok(())
}
