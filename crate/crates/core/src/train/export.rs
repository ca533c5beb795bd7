use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Result, TrainError};
use crate::tensor::Tensor;

/// Sidecar describing an exported embedding matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingMeta {
    pub num_nodes: usize,
    pub dim: usize,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes `embeddings.bin` (row-major little-endian f32, n × dim),
/// `labels.bin` (u16 per node) and `embeddings.json` into `dir`.
pub fn export_embeddings(
    embedding: &Tensor,
    labels: &[usize],
    dir: impl AsRef<Path>,
) -> Result<EmbeddingMeta> {
    let dir = dir.as_ref();
    let (n, d) = (embedding.rows(), embedding.cols());
    if labels.len() != n {
        return Err(TrainError::Contract(format!(
            "{} labels for {n} embedding rows",
            labels.len()
        )));
    }
    if !embedding.all_finite() {
        return Err(TrainError::Contract(
            "embedding contains non-finite values".into(),
        ));
    }
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let bytes: Vec<u8> = embedding
        .values()
        .iter()
        .flat_map(|&v| (v as f32).to_le_bytes())
        .collect();
    let path = dir.join("embeddings.bin");
    fs::write(&path, bytes).map_err(io_err(&path))?;
    let mut label_bytes = Vec::with_capacity(2 * n);
    for &y in labels {
        let y =
            u16::try_from(y).map_err(|_| TrainError::Contract(format!("label {y} exceeds u16")))?;
        label_bytes.extend_from_slice(&y.to_le_bytes());
    }
    let path = dir.join("labels.bin");
    fs::write(&path, label_bytes).map_err(io_err(&path))?;
    let meta = EmbeddingMeta {
        num_nodes: n,
        dim: d,
    };
    let path = dir.join("embeddings.json");
    fs::write(
        &path,
        serde_json::to_string_pretty(&meta).expect("plain struct"),
    )
    .map_err(io_err(&path))?;
    Ok(meta)
}

/// Reads back what [`export_embeddings`] wrote.
pub fn read_embeddings(dir: impl AsRef<Path>) -> Result<(Tensor, Vec<usize>)> {
    let dir = dir.as_ref();
    let path = dir.join("embeddings.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let meta: EmbeddingMeta = serde_json::from_str(&text)
        .map_err(|e| TrainError::Contract(format!("{}: {e}", path.display())))?;
    let path = dir.join("embeddings.bin");
    let raw = fs::read(&path).map_err(io_err(&path))?;
    if raw.len() != meta.num_nodes * meta.dim * 4 {
        return Err(TrainError::Contract(format!(
            "{}: expected {} bytes, found {}",
            path.display(),
            meta.num_nodes * meta.dim * 4,
            raw.len()
        )));
    }
    let values = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let path = dir.join("labels.bin");
    let raw = fs::read(&path).map_err(io_err(&path))?;
    if raw.len() != 2 * meta.num_nodes {
        return Err(TrainError::Contract(format!(
            "{}: wrong length {}",
            path.display(),
            raw.len()
        )));
    }
    let labels = raw
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]) as usize)
        .collect();
    Ok((
        Tensor::from_vec(vec![meta.num_nodes, meta.dim], values)?,
        labels,
    ))
}
