#![allow(dead_code)]

use std::path::Path;

use cfq_core::linalg::random::gaussian_matrix;
use cfq_core::manifest::{write_f32_matrix, DType, ModelManifest, Role, TensorEntry};
use cfq_core::{Axis, DenseMatrix, Seed};
use rand::Rng;

/// Gaussian entries with 1% of them scaled by 100.
pub fn heavy_tailed(rows: usize, cols: usize, seed: Seed) -> DenseMatrix {
    let mut rng = seed.rng();
    let mut w = gaussian_matrix(rows, cols, &mut rng);
    for r in 0..rows {
        for c in 0..cols {
            if rng.random::<f64>() < 0.01 {
                w[(r, c)] *= 100.0;
            }
        }
    }
    w
}

/// Triple-loop product, independent of the library's kernels.
pub fn naive_matmul(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    assert_eq!(a.cols(), b.rows());
    DenseMatrix::from_fn(a.rows(), b.cols(), |i, j| (0..a.cols()).map(|l| a[(i, l)] * b[(l, j)]).sum())
}

pub fn frobenius(a: &DenseMatrix) -> f64 {
    a.data().iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn diff_norm(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Writes a ten-tensor, two-layer model with heavy-tailed weights.
pub fn synthetic_model(dir: &Path, seed: u64) -> std::path::PathBuf {
    let d = 32;
    let h = 16;
    let ff = 64;
    let mut tensors = Vec::new();
    let mut add = |name: &str, role: Role, layer: i64, shape: (usize, usize), axis: Axis, i: u64| {
        let w = heavy_tailed(shape.0, shape.1, Seed(seed * 1000 + i));
        let file = format!("{name}.f32");
        write_f32_matrix(&dir.join(&file), &w).unwrap();
        tensors.push(TensorEntry {
            name: name.into(),
            role,
            layer_index: layer,
            shape,
            dtype: DType::F32,
            file: file.into(),
            contraction_axis: axis,
        });
    };
    add("embed", Role::Embedding, -1, (100, d), Axis::Cols, 0);
    for layer in 0..2i64 {
        let i = 10 * (layer as u64 + 1);
        add(&format!("l{layer}.attn_v"), Role::AttnV, layer, (d, h), Axis::Rows, i);
        add(&format!("l{layer}.attn_o"), Role::AttnO, layer, (d, h), Axis::Cols, i + 1);
        add(&format!("l{layer}.ffn_up"), Role::FfnUp, layer, (d, ff), Axis::Rows, i + 2);
        add(&format!("l{layer}.ffn_down"), Role::FfnDown, layer, (ff, d), Axis::Rows, i + 3);
    }
    add("l1.attn_q", Role::AttnQ, 1, (h, d), Axis::Cols, 99);
    let path = dir.join("manifest.json");
    ModelManifest {
        model_name: "synthetic".into(),
        tensors,
    }
    .save(&path)
    .unwrap();
    path
}
