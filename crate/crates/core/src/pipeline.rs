//! End-to-end quantization of a model manifest.
//!
//! Routing by role: V/O pairs of a layer get a paired transform and adaptive
//! rounding; every other weight gets a block-diagonal transform. Embeddings
//! stay in full precision unless `quantize_embedding` is set. Tensors are
//! processed in parallel, each with a seed derived from its name, so the
//! schedule cannot change the result.

use std::path::Path;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adaptive::{adaptive_round_transformed, AdaptiveRoundConfig};
use crate::artifact::{
    assign_stems, Artifact, ArtifactHeader, FlopSummary, PairSide, TensorData, TensorPayload, TensorRecord,
    TransformData, TransformInfo, FORMAT_VERSION,
};
use crate::error::{Error, Result};
use crate::linalg::{random_rotation, randomized_hadamard, Axis, DenseMatrix, Seed, DEFAULT_RCOND};
use crate::manifest::{ModelManifest, Role, TensorEntry};
use crate::paired::{optimize_paired, PairedLossKind, PairedOptConfig, PairedTransform};
use crate::quant::{quantize, QuantConfig, QuantizedMatrix};
use crate::report::{extra_flops_percent, TensorReport};
use crate::single::{optimize_single, BlockDiagTransform, SingleLossConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Plain uniform quantization.
    Uniform,
    /// Randomized Hadamard blocks, no learning.
    Random,
    /// Learned transforms plus adaptive rounding.
    #[default]
    Cafeq,
}

impl Method {
    pub fn label(&self) -> &'static str {
        match self {
            Method::Uniform => "uniform",
            Method::Random => "random",
            Method::Cafeq => "cafeq",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Method::Uniform),
            "random" => Ok(Method::Random),
            "cafeq" => Ok(Method::Cafeq),
            _ => Err(Error::Config(format!("unknown method {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptiveSettings {
    pub enabled: bool,
    pub iterations: usize,
    pub rcond: f64,
    pub early_stop: bool,
}

impl Default for AdaptiveSettings {
    fn default() -> Self {
        Self {
            enabled: true,
            iterations: 3,
            rcond: DEFAULT_RCOND,
            early_stop: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub method: Method,
    pub seed: Seed,
    /// Quantizer for single tensors and the first member of a pair; the second
    /// member uses its transpose.
    pub quant: QuantConfig,
    /// Block size of single transforms; `None` uses one dense block.
    pub block_size: Option<usize>,
    pub single: SingleLossConfig,
    pub paired: PairedOptConfig,
    pub paired_loss: PairedLossKind,
    pub adaptive: AdaptiveSettings,
    pub quantize_embedding: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            method: Method::Cafeq,
            seed: Seed(0),
            quant: QuantConfig::per_channel(4, Axis::Rows).with_f32_params(true),
            block_size: Some(128),
            single: SingleLossConfig::default(),
            paired: PairedOptConfig::default(),
            paired_loss: PairedLossKind::default(),
            adaptive: AdaptiveSettings::default(),
            quantize_embedding: false,
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=8).contains(&self.quant.bits) {
            return Err(Error::Config(format!("bits must be in [1, 8], got {}", self.quant.bits)));
        }
        if self.block_size == Some(0) {
            return Err(Error::Config("block size must be positive".into()));
        }
        if self.method == Method::Cafeq {
            self.single.validate()?;
            self.paired.validate()?;
            self.paired_loss.validate()?;
        }
        Ok(())
    }

    /// Quantizer actually used: parameters snapped to `f32` so stored
    /// artifacts decode to the grid the codes were chosen on.
    fn stored_quant(&self) -> QuantConfig {
        self.quant.with_f32_params(true)
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Requested block size if it divides `dim`, else their gcd.
pub fn resolve_block_size(dim: usize, requested: Option<usize>) -> usize {
    match requested {
        None => dim,
        Some(k) if dim % k == 0 => k,
        Some(k) => gcd(dim, k),
    }
}

/// Largest power of two dividing `k`.
fn power_of_two_part(k: usize) -> usize {
    1 << k.trailing_zeros()
}

fn relative(err: f64, norm: f64) -> Option<f64> {
    (norm > 0.0).then(|| err / norm)
}

struct Processed {
    record: TensorRecord,
    data: TensorData,
}

fn base_report(cfg: &PipelineConfig, entry: &TensorEntry, quant: &QuantConfig) -> TensorReport {
    TensorReport {
        name: entry.name.clone(),
        role: entry.role.label().into(),
        method: cfg.method.label().into(),
        bits: quant.bits,
        granularity: quant.granularity.label(),
        block_size: None,
        relative_error: None,
        relative_pqe: None,
        extra_flops_percent: 0.0,
        fallback: None,
        quantized: true,
    }
}

fn record(entry: &TensorEntry, stem: &str, quant: Option<QuantConfig>, transform: TransformInfo, seed: Seed, report: TensorReport) -> TensorRecord {
    TensorRecord {
        name: entry.name.clone(),
        stem: stem.into(),
        role: entry.role,
        layer_index: entry.layer_index,
        shape: entry.shape,
        contraction_axis: entry.contraction_axis,
        quant,
        transform,
        seed,
        report,
    }
}

fn is_recoverable(e: &Error) -> bool {
    matches!(
        e,
        Error::Divergence { .. } | Error::Singular { .. } | Error::NoConvergence { .. } | Error::NonFinite(_)
    )
}

fn process_raw(cfg: &PipelineConfig, entry: &TensorEntry, stem: &str, w: DenseMatrix) -> Processed {
    let mut report = base_report(cfg, entry, &cfg.stored_quant());
    report.quantized = false;
    Processed {
        record: record(entry, stem, None, TransformInfo::None, Seed(0), report),
        data: TensorData {
            payload: TensorPayload::Raw(w),
            transform: TransformData::None,
        },
    }
}

fn process_single(cfg: &PipelineConfig, entry: &TensorEntry, stem: &str, w: &DenseMatrix) -> Result<Processed> {
    let quant = cfg.stored_quant();
    let seed = cfg.seed.derive(&entry.name);
    let (d_in, d_out) = w.shape();
    let k = resolve_block_size(d_in, cfg.block_size);
    let mut report = base_report(cfg, entry, &quant);

    let learned: Option<Result<BlockDiagTransform>> = match cfg.method {
        Method::Uniform => None,
        Method::Random => Some(BlockDiagTransform::hadamard_blocks(d_in, power_of_two_part(k), seed)),
        Method::Cafeq => {
            let single = SingleLossConfig { bits: quant.bits, ..cfg.single };
            Some(optimize_single(w, k, &single, seed).map(|o| o.transform))
        }
    };
    let transform = match learned.map(|r| r.and_then(|t| t.rounded_to_f32())) {
        None => None,
        Some(Ok(t)) => Some(t),
        Some(Err(e)) if is_recoverable(&e) => {
            warn!("{}: {e}; falling back to uniform quantization", entry.name);
            report.fallback = Some(e.to_string());
            None
        }
        Some(Err(e)) => return Err(e),
    };

    let (q, recon, info, data_t) = match transform {
        None => {
            let q = quantize(w, &quant)?;
            let recon = q.dequantize();
            (q, recon, TransformInfo::None, TransformData::None)
        }
        Some(t) => {
            let q = quantize(&t.apply(w)?, &quant)?;
            let recon = t.apply_inverse(&q.dequantize())?;
            let k = t.block_size();
            report.block_size = Some(k);
            report.extra_flops_percent = extra_flops_percent(d_in, k, d_in, d_out);
            (q, recon, TransformInfo::BlockDiag { block_size: k }, TransformData::BlockDiag(t))
        }
    };
    report.relative_error = relative(recon.sub(w)?.frobenius(), w.frobenius());
    Ok(Processed {
        record: record(entry, stem, Some(quant), info, seed, report),
        data: TensorData {
            payload: TensorPayload::Quantized(q),
            transform: data_t,
        },
    })
}

struct PairQuant {
    q1: QuantizedMatrix,
    q2: QuantizedMatrix,
    transform: Option<PairedTransform>,
}

fn quantize_pair(cfg: &PipelineConfig, w1: &DenseMatrix, w2: &DenseMatrix, seed: Seed) -> Result<PairQuant> {
    let quant = cfg.stored_quant();
    let independent = |t: Option<PairedTransform>| -> Result<PairQuant> {
        let (u, v) = match &t {
            Some(t) => t.apply(w1, w2)?,
            None => (w1.clone(), w2.clone()),
        };
        Ok(PairQuant {
            q1: quantize(&u, &quant)?,
            q2: quantize(&v, &quant.transposed())?,
            transform: t,
        })
    };
    let h = w1.cols();
    match cfg.method {
        Method::Uniform => independent(None),
        Method::Random => {
            let m = if h.is_power_of_two() {
                randomized_hadamard(h, seed)?
            } else {
                random_rotation(h, seed)?
            };
            independent(Some(PairedTransform::from_matrix(m)?.rounded_to_f32()?))
        }
        Method::Cafeq => {
            let paired = PairedOptConfig {
                track_quant: quant,
                ..cfg.paired
            };
            let t = optimize_paired(w1, w2, &paired, cfg.paired_loss, seed)?.transform.rounded_to_f32()?;
            if !cfg.adaptive.enabled {
                return independent(Some(t));
            }
            let acfg = AdaptiveRoundConfig {
                iterations: cfg.adaptive.iterations,
                q1: quant,
                q2: quant.transposed(),
                rcond: cfg.adaptive.rcond,
                early_stop: cfg.adaptive.early_stop,
            };
            let out = adaptive_round_transformed(w1, w2, &t, &acfg)?;
            Ok(PairQuant {
                q1: out.w1,
                q2: out.w2,
                transform: Some(t),
            })
        }
    }
}

fn process_pair(
    cfg: &PipelineConfig,
    (ve, vs): (&TensorEntry, &str),
    (oe, os): (&TensorEntry, &str),
    w1: &DenseMatrix,
    w2: &DenseMatrix,
) -> Result<(Processed, Processed)> {
    let quant = cfg.stored_quant();
    let seed = cfg.seed.derive(&ve.name);
    let mut fallback = None;
    let pq = match quantize_pair(cfg, w1, w2, seed) {
        Ok(pq) => pq,
        Err(e) if is_recoverable(&e) => {
            warn!("{}/{}: {e}; falling back to uniform quantization", ve.name, oe.name);
            fallback = Some(e.to_string());
            PairQuant {
                q1: quantize(w1, &quant)?,
                q2: quantize(w2, &quant.transposed())?,
                transform: None,
            }
        }
        Err(e) => return Err(e),
    };

    let u_hat = pq.q1.dequantize();
    let v_hat = pq.q2.dequantize();
    let (w1_rec, w2_rec) = match &pq.transform {
        Some(t) => (u_hat.matmul(t.inverse())?, t.matrix().matmul(&v_hat)?),
        None => (u_hat.clone(), v_hat.clone()),
    };
    let exact = w1.mul(w2);
    let pqe = relative(u_hat.mul(&v_hat).sub(&exact)?.frobenius(), exact.frobenius());

    let mut rv = base_report(cfg, ve, &quant);
    rv.relative_error = relative(w1_rec.sub(w1)?.frobenius(), w1.frobenius());
    rv.relative_pqe = pqe;
    rv.fallback = fallback.clone();
    let mut ro = base_report(cfg, oe, &quant.transposed());
    ro.relative_error = relative(w2_rec.sub(w2)?.frobenius(), w2.frobenius());
    ro.relative_pqe = pqe;
    ro.fallback = fallback;

    let h = w1.cols();
    let (vi, oi, vt, ot) = match pq.transform {
        Some(t) => (
            TransformInfo::Paired {
                partner: oe.name.clone(),
                side: PairSide::First,
                dim: h,
            },
            TransformInfo::Paired {
                partner: ve.name.clone(),
                side: PairSide::Second,
                dim: h,
            },
            TransformData::Paired(t),
            TransformData::PairedPartner,
        ),
        None => (TransformInfo::None, TransformInfo::None, TransformData::None, TransformData::None),
    };
    Ok((
        Processed {
            record: record(ve, vs, Some(quant), vi, seed, rv),
            data: TensorData {
                payload: TensorPayload::Quantized(pq.q1),
                transform: vt,
            },
        },
        Processed {
            record: record(oe, os, Some(quant.transposed()), oi, seed, ro),
            data: TensorData {
                payload: TensorPayload::Quantized(pq.q2),
                transform: ot,
            },
        },
    ))
}

enum Job {
    Single(usize),
    Raw(usize),
    Pair(usize, usize),
}

/// Quantizes every tensor of `manifest` (payloads resolved against `base`).
pub fn quantize_model(manifest: &ModelManifest, base: &Path, cfg: &PipelineConfig) -> Result<Artifact> {
    cfg.validate()?;
    manifest.validate_files(base)?;
    let stems = assign_stems(manifest.tensors.iter().map(|t| t.name.as_str()));
    let (pairs, _) = manifest.vo_pairs();
    let mut paired = vec![false; manifest.tensors.len()];
    let mut jobs = Vec::new();
    for p in &pairs {
        paired[p.v] = true;
        paired[p.o] = true;
    }
    for (i, t) in manifest.tensors.iter().enumerate() {
        if paired[i] {
            if let Some(p) = pairs.iter().find(|p| p.v == i) {
                jobs.push(Job::Pair(p.v, p.o));
            }
        } else if t.role == Role::Embedding && !cfg.quantize_embedding {
            jobs.push(Job::Raw(i));
        } else {
            jobs.push(Job::Single(i));
        }
    }

    let load = |i: usize| -> Result<DenseMatrix> {
        let e = &manifest.tensors[i];
        Ok(e.to_canonical(manifest.load_tensor(base, e)?))
    };
    let results: Vec<Result<Vec<(usize, Processed)>>> = jobs
        .par_iter()
        .map(|job| {
            Ok(match *job {
                Job::Raw(i) => vec![(i, process_raw(cfg, &manifest.tensors[i], &stems[i], load(i)?))],
                Job::Single(i) => {
                    info!("quantizing {}", manifest.tensors[i].name);
                    vec![(i, process_single(cfg, &manifest.tensors[i], &stems[i], &load(i)?)?)]
                }
                Job::Pair(v, o) => {
                    info!("quantizing pair {} / {}", manifest.tensors[v].name, manifest.tensors[o].name);
                    let (pv, po) = process_pair(
                        cfg,
                        (&manifest.tensors[v], &stems[v]),
                        (&manifest.tensors[o], &stems[o]),
                        &load(v)?,
                        &load(o)?,
                    )?;
                    vec![(v, pv), (o, po)]
                }
            })
        })
        .collect();

    let mut slots: Vec<Option<Processed>> = (0..manifest.tensors.len()).map(|_| None).collect();
    for r in results {
        for (i, p) in r? {
            slots[i] = Some(p);
        }
    }
    let (records, data): (Vec<_>, Vec<_>) = slots
        .into_iter()
        .map(|p| {
            let p = p.expect("every tensor is assigned to exactly one job");
            (p.record, p.data)
        })
        .unzip();

    let flops: Vec<f64> = records
        .iter()
        .filter(|r: &&TensorRecord| r.report.quantized)
        .map(|r| r.report.extra_flops_percent)
        .collect();
    let header = ArtifactHeader {
        format_version: FORMAT_VERSION,
        model_name: manifest.model_name.clone(),
        method: cfg.method,
        seed: cfg.seed,
        config: cfg.clone(),
        flops: FlopSummary {
            mean_extra_flops_percent: if flops.is_empty() { 0.0 } else { flops.iter().sum::<f64>() / flops.len() as f64 },
            max_extra_flops_percent: flops.iter().copied().fold(0.0, f64::max),
        },
        tensors: records,
    };
    Ok(Artifact { header, data })
}

/// Loads a manifest, quantizes it and writes the artifact to `out`.
pub fn quantize_to_dir(manifest_path: &Path, cfg: &PipelineConfig, out: &Path) -> Result<Artifact> {
    let (manifest, base) = ModelManifest::load(manifest_path)?;
    let artifact = quantize_model(&manifest, &base, cfg)?;
    artifact.write(out)?;
    Ok(artifact)
}
