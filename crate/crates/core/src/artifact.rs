//! On-disk quantized model format.
//!
//! A directory holding `header.json` and, per tensor, `<stem>.codes` (packed
//! codes), `<stem>.scales` and `<stem>.mins` (little-endian `f32`), an
//! optional `<stem>.transform`, or `<stem>.f32` for tensors kept in full
//! precision. Everything needed to reconstruct is in the directory.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Axis, DenseMatrix, Seed};
use crate::manifest::{read_f32_file, read_f32_matrix, write_f32_file, write_f32_matrix, ModelManifest, Role, TensorEntry};
use crate::packing::{pack, unpack};
use crate::paired::PairedTransform;
use crate::pipeline::{Method, PipelineConfig};
use crate::quant::{QuantConfig, QuantizedMatrix};
use crate::report::TensorReport;
use crate::single::BlockDiagTransform;

pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_FILE: &str = "header.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairSide {
    /// `W₁M`; this side stores `M`.
    First,
    /// `M⁻¹W₂`.
    Second,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransformInfo {
    None,
    BlockDiag { block_size: usize },
    Paired { partner: String, side: PairSide, dim: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    /// File name prefix inside the artifact directory.
    pub stem: String,
    pub role: Role,
    pub layer_index: i64,
    /// Shape and orientation as given in the source manifest.
    pub shape: (usize, usize),
    pub contraction_axis: Axis,
    /// `None` for tensors stored unquantized.
    pub quant: Option<QuantConfig>,
    pub transform: TransformInfo,
    pub seed: Seed,
    pub report: TensorReport,
}

impl TensorRecord {
    pub fn entry(&self, file: PathBuf) -> TensorEntry {
        TensorEntry {
            name: self.name.clone(),
            role: self.role,
            layer_index: self.layer_index,
            shape: self.shape,
            dtype: Default::default(),
            file,
            contraction_axis: self.contraction_axis,
        }
    }

    fn canonical_shape(&self) -> (usize, usize) {
        self.entry(PathBuf::new()).canonical_shape()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopSummary {
    pub mean_extra_flops_percent: f64,
    pub max_extra_flops_percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactHeader {
    pub format_version: u32,
    pub model_name: String,
    pub method: Method,
    pub seed: Seed,
    pub config: PipelineConfig,
    pub flops: FlopSummary,
    pub tensors: Vec<TensorRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorPayload {
    Raw(DenseMatrix),
    Quantized(QuantizedMatrix),
}

#[derive(Debug, Clone)]
pub enum TransformData {
    None,
    BlockDiag(BlockDiagTransform),
    /// Held by the first member of a pair.
    Paired(PairedTransform),
    /// Second member; the matrix lives with the partner.
    PairedPartner,
}

#[derive(Debug, Clone)]
pub struct TensorData {
    pub payload: TensorPayload,
    pub transform: TransformData,
}

#[derive(Debug, Clone)]
pub struct Artifact {
    pub header: ArtifactHeader,
    /// Parallel to `header.tensors`.
    pub data: Vec<TensorData>,
}

/// File-system-safe, unique stems for tensor names.
pub fn assign_stems<'a>(names: impl IntoIterator<Item = &'a str>) -> Vec<String> {
    let mut used = HashSet::new();
    names
        .into_iter()
        .map(|name| {
            let base: String = name
                .chars()
                .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
                .collect();
            let base = if base.starts_with('.') { format!("_{base}") } else { base };
            let mut stem = base.clone();
            let mut i = 1;
            while !used.insert(stem.clone()) {
                stem = format!("{base}_{i}");
                i += 1;
            }
            stem
        })
        .collect()
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn blocks_to_f32(t: &BlockDiagTransform) -> Vec<f32> {
    t.blocks().iter().flat_map(|b| b.to_f32()).collect()
}

impl Artifact {
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (rec, data) in self.header.tensors.iter().zip(&self.data) {
            let file = |ext: &str| dir.join(format!("{}.{ext}", rec.stem));
            match &data.payload {
                TensorPayload::Raw(m) => write_f32_matrix(&file("f32"), m)?,
                TensorPayload::Quantized(q) => {
                    let (rows, cols) = q.shape();
                    write_bytes(&file("codes"), &pack(q.codes(), rows, cols, q.config().bits)?)?;
                    write_f32_file(&file("scales"), q.group_scale().iter().map(|&s| s as f32))?;
                    write_f32_file(&file("mins"), q.group_min().iter().map(|&m| m as f32))?;
                }
            }
            match &data.transform {
                TransformData::BlockDiag(t) => write_f32_file(&file("transform"), blocks_to_f32(t))?,
                TransformData::Paired(t) => write_f32_matrix(&file("transform"), t.matrix())?,
                TransformData::None | TransformData::PairedPartner => {}
            }
        }
        let header = serde_json::to_string_pretty(&self.header)?;
        write_bytes(&dir.join(HEADER_FILE), header.as_bytes())
    }

    pub fn read_header(dir: &Path) -> Result<ArtifactHeader> {
        let path = dir.join(HEADER_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        match value.get("format_version").and_then(|v| v.as_u64()) {
            Some(v) if v == FORMAT_VERSION as u64 => {}
            Some(v) => {
                return Err(Error::Format(format!(
                    "artifact format version {v} is not supported (expected {FORMAT_VERSION})"
                )))
            }
            None => return Err(Error::Format("artifact header lacks a format version".into())),
        }
        Ok(serde_json::from_value(value)?)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let header = Self::read_header(dir)?;
        let mut data = Vec::with_capacity(header.tensors.len());
        for rec in &header.tensors {
            let file = |ext: &str| dir.join(format!("{}.{ext}", rec.stem));
            let (rows, cols) = rec.canonical_shape();
            let payload = match rec.quant {
                None => TensorPayload::Raw(read_f32_matrix(&file("f32"), rows, cols)?),
                Some(cfg) => {
                    let path = file("codes");
                    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
                    let codes = unpack(&bytes, rows, cols, cfg.bits)?;
                    let widen = |v: Vec<f32>| v.into_iter().map(f64::from).collect::<Vec<_>>();
                    let scales = widen(read_f32_file(&file("scales"))?);
                    let mins = widen(read_f32_file(&file("mins"))?);
                    TensorPayload::Quantized(QuantizedMatrix::from_parts(rows, cols, cfg, codes, mins, scales)?)
                }
            };
            let transform = match &rec.transform {
                TransformInfo::None => TransformData::None,
                TransformInfo::BlockDiag { block_size } => {
                    let k = *block_size;
                    if k == 0 || rows % k != 0 {
                        return Err(Error::Format(format!("{}: bad block size {k}", rec.name)));
                    }
                    let values = read_f32_file(&file("transform"))?;
                    if values.len() != rows * k {
                        return Err(Error::Format(format!("{}: transform has wrong length", rec.name)));
                    }
                    let blocks = values
                        .chunks_exact(k * k)
                        .map(|c| DenseMatrix::from_f32(k, k, c))
                        .collect::<Result<Vec<_>>>()?;
                    TransformData::BlockDiag(BlockDiagTransform::from_blocks(blocks)?)
                }
                TransformInfo::Paired { side: PairSide::First, dim, .. } => {
                    let m = read_f32_matrix(&file("transform"), *dim, *dim)?;
                    TransformData::Paired(PairedTransform::from_matrix(m)?)
                }
                TransformInfo::Paired { side: PairSide::Second, .. } => TransformData::PairedPartner,
            };
            data.push(TensorData { payload, transform });
        }
        Ok(Self { header, data })
    }

    fn paired_matrix(&self, partner: &str) -> Result<&PairedTransform> {
        let i = self
            .header
            .tensors
            .iter()
            .position(|r| r.name == partner)
            .ok_or_else(|| Error::Format(format!("missing paired partner {partner:?}")))?;
        match &self.data[i].transform {
            TransformData::Paired(t) => Ok(t),
            _ => Err(Error::Format(format!("{partner:?} does not hold a paired transform"))),
        }
    }

    /// Canonical-orientation reconstruction of tensor `i`.
    ///
    /// Single transforms are always undone. Paired tensors come back as the
    /// transformed `Ŵ₁M`/`M⁻¹Ŵ₂` unless `reverse_paired` is set.
    pub fn reconstruct_canonical(&self, i: usize, reverse_paired: bool) -> Result<DenseMatrix> {
        let rec = &self.header.tensors[i];
        let data = &self.data[i];
        let base = match &data.payload {
            TensorPayload::Raw(m) => return Ok(m.clone()),
            TensorPayload::Quantized(q) => q.dequantize(),
        };
        match (&data.transform, &rec.transform) {
            (TransformData::None, _) => Ok(base),
            (TransformData::BlockDiag(t), _) => t.apply_inverse(&base),
            (_, TransformInfo::Paired { .. }) if !reverse_paired => Ok(base),
            (TransformData::Paired(t), _) => base.matmul(t.inverse()),
            (TransformData::PairedPartner, TransformInfo::Paired { partner, .. }) => {
                self.paired_matrix(partner)?.matrix().matmul(&base)
            }
            (TransformData::PairedPartner, _) => Err(Error::Format(format!("{}: inconsistent transform", rec.name))),
        }
    }

    /// Reconstruction in the manifest's original orientation.
    pub fn reconstruct(&self, i: usize, reverse_paired: bool) -> Result<DenseMatrix> {
        let rec = &self.header.tensors[i];
        Ok(rec.entry(PathBuf::new()).from_canonical(self.reconstruct_canonical(i, reverse_paired)?))
    }

    /// Writes every tensor as raw `f32` plus a `manifest.json` describing them.
    pub fn write_reconstruction(&self, dir: &Path, reverse_paired: bool) -> Result<ModelManifest> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut tensors = Vec::with_capacity(self.data.len());
        for (i, rec) in self.header.tensors.iter().enumerate() {
            let file = PathBuf::from(format!("{}.f32", rec.stem));
            write_f32_matrix(&dir.join(&file), &self.reconstruct(i, reverse_paired)?)?;
            tensors.push(rec.entry(file));
        }
        let manifest = ModelManifest {
            model_name: self.header.model_name.clone(),
            tensors,
        };
        manifest.save(&dir.join("manifest.json"))?;
        Ok(manifest)
    }

    pub fn reports(&self) -> Vec<TensorReport> {
        self.header.tensors.iter().map(|r| r.report.clone()).collect()
    }

    pub fn index_of(&self) -> HashMap<&str, usize> {
        self.header
            .tensors
            .iter()
            .enumerate()
            .map(|(i, r)| (r.name.as_str(), i))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stems_are_sanitized_and_unique() {
        let stems = assign_stems(["layers/0/v", "layers_0_v", "..x", "a b"]);
        assert_eq!(stems, vec!["layers_0_v", "layers_0_v_1", "_..x", "a_b"]);
    }

    #[test]
    fn rejects_other_versions() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(HEADER_FILE), r#"{"format_version": 99}"#).unwrap();
        let err = Artifact::read_header(dir.path()).unwrap_err();
        assert!(err.to_string().contains("version 99"));
    }
}
