//! On-disk bundle directory:
//!
//! | file          | content                                                    |
//! |---------------|------------------------------------------------------------|
//! | `meta.json`   | `{"magic":"GRB1","num_nodes","num_classes","feature_dim","num_edges"}` |
//! | `features.bin`| little-endian `f32`, row-major `num_nodes × feature_dim`   |
//! | `edges.bin`   | little-endian `u32` pairs `(src, dst)`, symmetrized, sorted |
//! | `labels.bin`  | little-endian `u16` per node                               |
//! | `masks.bin`   | one byte per node: 0 unused, 1 train, 2 val, 3 test        |
//!
//! `num_edges` counts undirected edges; `edges.bin` stores each of them in
//! both directions, so it holds `2 · num_edges` pairs.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{GraphBundle, GraphError, Result, Split};
use crate::tensor::Tensor;

pub const BUNDLE_MAGIC: &str = "GRB1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleMeta {
    pub magic: String,
    pub num_nodes: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub num_edges: usize,
}

fn read_file(dir: &Path, name: &'static str) -> Result<Vec<u8>> {
    let path = dir.join(name);
    fs::read(&path).map_err(|source| GraphError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn expect_len(file: &'static str, bytes: &[u8], expected: usize) -> Result<()> {
    if bytes.len() != expected {
        return Err(GraphError::Truncated {
            file,
            expected: expected as u64,
            actual: bytes.len() as u64,
        });
    }
    Ok(())
}

/// Reads and validates a bundle directory. Nothing is returned unless every
/// file is present, correctly sized and consistent.
pub fn read_bundle(dir: impl AsRef<Path>) -> Result<GraphBundle> {
    let dir = dir.as_ref();
    let meta: BundleMeta = serde_json::from_slice(&read_file(dir, "meta.json")?)?;
    if meta.magic != BUNDLE_MAGIC {
        return Err(GraphError::Magic { found: meta.magic });
    }
    let (n, d) = (meta.num_nodes, meta.feature_dim);
    if meta.num_classes == 0 || meta.num_classes > u16::MAX as usize + 1 {
        return Err(GraphError::Invalid {
            field: "num_classes",
            detail: format!("{} is not a usable class count", meta.num_classes),
        });
    }

    let raw = read_file(dir, "features.bin")?;
    expect_len("features.bin", &raw, n * d * 4)?;
    let mut values = Vec::with_capacity(n * d);
    for (k, chunk) in raw.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(GraphError::Corrupt {
                file: "features.bin",
                offset: (k * 4) as u64,
                detail: format!("non-finite value {v}"),
            });
        }
        values.push(v as f64);
    }
    let features = Tensor::from_vec(vec![n, d], values).expect("sized above");

    let raw = read_file(dir, "edges.bin")?;
    expect_len("edges.bin", &raw, meta.num_edges * 2 * 8)?;
    let mut edges = Vec::with_capacity(meta.num_edges * 2);
    for (k, chunk) in raw.chunks_exact(8).enumerate() {
        let src = u32::from_le_bytes(chunk[..4].try_into().unwrap()) as usize;
        let dst = u32::from_le_bytes(chunk[4..].try_into().unwrap()) as usize;
        let offset = (k * 8) as u64;
        let corrupt = |detail: String| GraphError::Corrupt {
            file: "edges.bin",
            offset,
            detail,
        };
        if src >= n || dst >= n {
            return Err(corrupt(format!(
                "edge ({src}, {dst}) references a node >= {n}"
            )));
        }
        if src == dst {
            return Err(corrupt(format!("self-loop on node {src}")));
        }
        if let Some(&prev) = edges.last() {
            if prev >= (src, dst) {
                return Err(corrupt(format!(
                    "edge ({src}, {dst}) out of order or duplicated"
                )));
            }
        }
        edges.push((src, dst));
    }

    let raw = read_file(dir, "labels.bin")?;
    expect_len("labels.bin", &raw, n * 2)?;
    let mut labels = Vec::with_capacity(n);
    for (k, chunk) in raw.chunks_exact(2).enumerate() {
        let y = u16::from_le_bytes(chunk.try_into().unwrap()) as usize;
        if y >= meta.num_classes {
            return Err(GraphError::Corrupt {
                file: "labels.bin",
                offset: (k * 2) as u64,
                detail: format!("label {y} >= num_classes {}", meta.num_classes),
            });
        }
        labels.push(y);
    }

    let raw = read_file(dir, "masks.bin")?;
    expect_len("masks.bin", &raw, n)?;
    let mut splits = Vec::with_capacity(n);
    for (k, &b) in raw.iter().enumerate() {
        splits.push(Split::from_byte(b).ok_or_else(|| GraphError::Corrupt {
            file: "masks.bin",
            offset: k as u64,
            detail: format!("mask byte {b} is not 0..=3"),
        })?);
    }

    let bundle = GraphBundle {
        num_nodes: n,
        num_classes: meta.num_classes,
        features: Arc::new(features),
        edges,
        labels,
        splits,
    };
    bundle.validate()?;
    Ok(bundle)
}

fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(|source| GraphError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn write_bundle(bundle: &GraphBundle, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|source| GraphError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    if bundle.num_nodes > u32::MAX as usize {
        return Err(GraphError::Config("node ids exceed u32".into()));
    }
    let meta = BundleMeta {
        magic: BUNDLE_MAGIC.to_string(),
        num_nodes: bundle.num_nodes,
        num_classes: bundle.num_classes,
        feature_dim: bundle.feature_dim(),
        num_edges: bundle.num_undirected_edges(),
    };
    write_file(
        dir,
        "meta.json",
        serde_json::to_string_pretty(&meta)?.as_bytes(),
    )?;

    let mut buf = Vec::with_capacity(bundle.features.len() * 4);
    for &v in bundle.features.values() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    write_file(dir, "features.bin", &buf)?;

    let mut buf = Vec::with_capacity(bundle.edges.len() * 8);
    for &(a, b) in &bundle.edges {
        buf.extend_from_slice(&(a as u32).to_le_bytes());
        buf.extend_from_slice(&(b as u32).to_le_bytes());
    }
    write_file(dir, "edges.bin", &buf)?;

    let buf: Vec<u8> = bundle
        .labels
        .iter()
        .flat_map(|&y| (y as u16).to_le_bytes())
        .collect();
    write_file(dir, "labels.bin", &buf)?;

    let buf: Vec<u8> = bundle.splits.iter().map(|&s| s as u8).collect();
    write_file(dir, "masks.bin", &buf)
}
