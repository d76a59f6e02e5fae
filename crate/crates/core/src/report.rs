//! Per-tensor error metrics, aggregates and transform overhead.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Runtime cost of a block-diagonal transform with `k×k` blocks on a
/// `transform_dim` axis, `2·transform_dim·k` per token, as a percentage of the
/// layer matmul `2·d_in·d_out`.
pub fn extra_flops_percent(transform_dim: usize, block_size: usize, d_in: usize, d_out: usize) -> f64 {
    100.0 * (transform_dim as f64 * block_size as f64) / (d_in as f64 * d_out as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorReport {
    pub name: String,
    pub role: String,
    pub method: String,
    pub bits: u8,
    pub granularity: String,
    /// Empty when the tensor has no single-matrix transform.
    pub block_size: Option<usize>,
    pub relative_error: Option<f64>,
    /// Only for V/O pairs; shared by both members.
    pub relative_pqe: Option<f64>,
    pub extra_flops_percent: f64,
    /// Reason a tensor fell back to plain uniform quantization.
    pub fallback: Option<String>,
    pub quantized: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub group: String,
    pub tensors: usize,
    pub mean_relative_error: Option<f64>,
    pub mean_relative_pqe: Option<f64>,
    pub mean_extra_flops_percent: f64,
    pub fallbacks: usize,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (n, s) = xs.fold((0usize, 0.0), |(n, s), x| (n + 1, s + x));
    (n > 0).then(|| s / n as f64)
}

fn aggregate(group: String, rows: &[&TensorReport]) -> Aggregate {
    Aggregate {
        group,
        tensors: rows.len(),
        mean_relative_error: mean(rows.iter().filter_map(|r| r.relative_error)),
        mean_relative_pqe: mean(rows.iter().filter_map(|r| r.relative_pqe)),
        mean_extra_flops_percent: mean(rows.iter().map(|r| r.extra_flops_percent)).unwrap_or(0.0),
        fallbacks: rows.iter().filter(|r| r.fallback.is_some()).count(),
    }
}

/// One aggregate per role (sorted) followed by `overall`. Unquantized
/// tensors are excluded.
pub fn aggregates(rows: &[TensorReport]) -> Vec<Aggregate> {
    let quantized: Vec<&TensorReport> = rows.iter().filter(|r| r.quantized).collect();
    let mut by_role: BTreeMap<&str, Vec<&TensorReport>> = BTreeMap::new();
    for r in &quantized {
        by_role.entry(r.role.as_str()).or_default().push(r);
    }
    let mut out: Vec<Aggregate> = by_role
        .into_iter()
        .map(|(role, rs)| aggregate(role.to_string(), &rs))
        .collect();
    out.push(aggregate("overall".into(), &quantized));
    out
}

pub fn write_csv<W: Write>(rows: &[TensorReport], out: W) -> Result<()> {
    write_rows(rows, out)
}

/// Any serializable rows as CSV with a header taken from the field names.
pub fn write_rows<T: Serialize, W: Write>(rows: &[T], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Human-readable summary of [`aggregates`].
pub fn summary(rows: &[TensorReport]) -> String {
    let fmt = |x: Option<f64>| x.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"));
    let mut s = format!(
        "{:<12} {:>7} {:>12} {:>12} {:>10} {:>9}\n",
        "group", "tensors", "rel_error", "rel_pqe", "flops_%", "fallback"
    );
    for a in aggregates(rows) {
        s.push_str(&format!(
            "{:<12} {:>7} {:>12} {:>12} {:>10.4} {:>9}\n",
            a.group,
            a.tensors,
            fmt(a.mean_relative_error),
            fmt(a.mean_relative_pqe),
            a.mean_extra_flops_percent,
            a.fallbacks
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(name: &str, role: &str, err: f64, pqe: Option<f64>, fallback: bool) -> TensorReport {
        TensorReport {
            name: name.into(),
            role: role.into(),
            method: "cafeq".into(),
            bits: 4,
            granularity: "per_channel".into(),
            block_size: Some(32),
            relative_error: Some(err),
            relative_pqe: pqe,
            extra_flops_percent: 1.0,
            fallback: fallback.then(|| "divergence".into()),
            quantized: true,
        }
    }

    #[test]
    fn dense_square_block_costs_a_full_matmul() {
        assert!((extra_flops_percent(512, 512, 512, 512) - 100.0).abs() < 1e-12);
    }

    #[test]
    fn aggregates_by_role() {
        let rows = vec![
            row("a", "ffn_up", 0.1, None, false),
            row("b", "ffn_up", 0.3, None, true),
            row("c", "attn_v", 0.2, Some(0.5), false),
        ];
        let agg = aggregates(&rows);
        assert_eq!(agg.len(), 3);
        assert_eq!(agg[1].group, "ffn_up");
        assert!((agg[1].mean_relative_error.unwrap() - 0.2).abs() < 1e-12);
        assert_eq!(agg[1].fallbacks, 1);
        assert_eq!(agg[2].group, "overall");
        assert_eq!(agg[2].mean_relative_pqe, Some(0.5));
        assert!(summary(&rows).contains("overall"));
    }

    #[test]
    fn csv_has_header_and_empty_optionals() {
        let mut buf = Vec::new();
        write_csv(&[row("a", "ffn_up", 0.1, None, false)], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "name,role,method,bits,granularity,block_size,relative_error,relative_pqe,extra_flops_percent,fallback,quantized"
        );
        assert_eq!(lines.next().unwrap(), "a,ffn_up,cafeq,4,per_channel,32,0.1,,1.0,,true");
    }
}
