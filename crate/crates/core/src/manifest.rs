//! JSON tensor manifests with raw little-endian `f32` payloads.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Axis, DenseMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    FfnGate,
    FfnUp,
    FfnDown,
    AttnQ,
    AttnK,
    AttnV,
    AttnO,
    Embedding,
    Other,
}

impl Role {
    pub fn label(&self) -> &'static str {
        match self {
            Role::FfnGate => "ffn_gate",
            Role::FfnUp => "ffn_up",
            Role::FfnDown => "ffn_down",
            Role::AttnQ => "attn_q",
            Role::AttnK => "attn_k",
            Role::AttnV => "attn_v",
            Role::AttnO => "attn_o",
            Role::Embedding => "embedding",
            Role::Other => "other",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DType {
    #[default]
    F32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub role: Role,
    pub layer_index: i64,
    /// `(rows, cols)` as stored on disk.
    pub shape: (usize, usize),
    #[serde(default)]
    pub dtype: DType,
    /// Path relative to the manifest's directory.
    pub file: PathBuf,
    /// The axis that multiplies the layer input. Tensors are canonicalized so
    /// that this axis becomes the rows.
    pub contraction_axis: Axis,
}

impl TensorEntry {
    /// Shape with the contraction axis on rows.
    pub fn canonical_shape(&self) -> (usize, usize) {
        match self.contraction_axis {
            Axis::Rows => self.shape,
            Axis::Cols => (self.shape.1, self.shape.0),
        }
    }

    pub fn to_canonical(&self, stored: DenseMatrix) -> DenseMatrix {
        match self.contraction_axis {
            Axis::Rows => stored,
            Axis::Cols => stored.transpose(),
        }
    }

    pub fn from_canonical(&self, canonical: DenseMatrix) -> DenseMatrix {
        self.to_canonical(canonical)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub model_name: String,
    pub tensors: Vec<TensorEntry>,
}

/// An `attn_v`/`attn_o` pair from the same layer, as indices into `tensors`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VoPair {
    pub v: usize,
    pub o: usize,
}

impl ModelManifest {
    pub fn from_json(text: &str) -> Result<Self> {
        let m: ModelManifest = serde_json::from_str(text)?;
        m.validate_entries()?;
        Ok(m)
    }

    /// Reads a manifest and returns it with the directory payloads resolve against.
    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m = Self::from_json(&text)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((m, base))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    fn validate_entries(&self) -> Result<()> {
        let mut names = HashSet::new();
        for t in &self.tensors {
            if t.name.is_empty() {
                return Err(Error::Format("tensor with empty name".into()));
            }
            if !names.insert(t.name.as_str()) {
                return Err(Error::Format(format!("duplicate tensor name {:?}", t.name)));
            }
            if t.shape.0 == 0 || t.shape.1 == 0 {
                return Err(Error::Format(format!("tensor {:?} has an empty shape", t.name)));
            }
        }
        Ok(())
    }

    /// Checks every payload file exists with `rows·cols·4` bytes.
    pub fn validate_files(&self, base: &Path) -> Result<()> {
        for t in &self.tensors {
            let path = base.join(&t.file);
            let meta = fs::metadata(&path).map_err(|e| Error::io(&path, e))?;
            let expected = (t.shape.0 * t.shape.1 * 4) as u64;
            if meta.len() != expected {
                return Err(Error::Format(format!(
                    "{}: expected {expected} bytes for shape {:?}, found {}",
                    path.display(),
                    t.shape,
                    meta.len()
                )));
            }
        }
        Ok(())
    }

    /// Loads a tensor in its stored orientation.
    pub fn load_tensor(&self, base: &Path, entry: &TensorEntry) -> Result<DenseMatrix> {
        read_f32_matrix(&base.join(&entry.file), entry.shape.0, entry.shape.1)
    }

    /// Same-layer V/O pairs with a conformable inner dimension. Anything that
    /// cannot be paired is returned separately and logged.
    pub fn vo_pairs(&self) -> (Vec<VoPair>, Vec<usize>) {
        let mut by_layer: BTreeMap<i64, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
        for (i, t) in self.tensors.iter().enumerate() {
            match t.role {
                Role::AttnV => by_layer.entry(t.layer_index).or_default().0.push(i),
                Role::AttnO => by_layer.entry(t.layer_index).or_default().1.push(i),
                _ => {}
            }
        }
        let mut pairs = Vec::new();
        let mut unpaired = Vec::new();
        for (layer, (vs, os)) in by_layer {
            if let ([v], [o]) = (vs.as_slice(), os.as_slice()) {
                let inner_v = self.tensors[*v].canonical_shape().1;
                let inner_o = self.tensors[*o].canonical_shape().0;
                if inner_v == inner_o {
                    pairs.push(VoPair { v: *v, o: *o });
                    continue;
                }
                warn!("layer {layer}: V/O inner dimensions {inner_v} and {inner_o} differ; not pairing");
            } else {
                warn!(
                    "layer {layer}: found {} value and {} output tensors; not pairing",
                    vs.len(),
                    os.len()
                );
            }
            unpaired.extend(vs);
            unpaired.extend(os);
        }
        unpaired.sort_unstable();
        (pairs, unpaired)
    }
}

pub fn read_f32_file(path: &Path) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Format(format!("{}: length is not a multiple of 4", path.display())));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn f32_bytes(values: impl IntoIterator<Item = f32>) -> Vec<u8> {
    values.into_iter().flat_map(f32::to_le_bytes).collect()
}

pub fn write_f32_file(path: &Path, values: impl IntoIterator<Item = f32>) -> Result<()> {
    fs::write(path, f32_bytes(values)).map_err(|e| Error::io(path, e))
}

pub fn read_f32_matrix(path: &Path, rows: usize, cols: usize) -> Result<DenseMatrix> {
    let values = read_f32_file(path)?;
    if values.len() != rows * cols {
        return Err(Error::Format(format!(
            "{}: expected {} values, found {}",
            path.display(),
            rows * cols,
            values.len()
        )));
    }
    DenseMatrix::from_f32(rows, cols, &values)
}

pub fn write_f32_matrix(path: &Path, m: &DenseMatrix) -> Result<()> {
    write_f32_file(path, m.to_f32())
}
