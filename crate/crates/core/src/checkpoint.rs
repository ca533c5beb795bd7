//! On-disk checkpoints for expert models and fusion policies.
//!
//! A checkpoint is a directory with `meta.json` and `params.bin`. The binary
//! file holds every parameter tensor, little-endian f64, row-major, in the
//! declaration order listed under `params` in the metadata.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::{FusionPolicy, ProjectionHeads, Strategy};
use crate::models::{ExpertModel, ModelConfig, ModelError, ParamSet};
use crate::tensor::Tensor;

pub const META_FILE: &str = "meta.json";
pub const PARAMS_FILE: &str = "params.bin";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

/// Name and shape of one stored tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelMeta {
    pub kind: String,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub embedding_dim: usize,
    pub seed: u64,
    /// Epoch whose parameters were kept (0 = initialization).
    pub epoch: usize,
    pub config: ModelConfig,
    pub params: Vec<ParamEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadsMeta {
    pub gnn_dim: usize,
    pub gat_dim: usize,
    pub proj_dim: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyMeta {
    pub kind: String,
    pub num_classes: usize,
    pub strategy: Strategy,
    pub base_weights: Vec<[f64; 2]>,
    pub alpha: Vec<f64>,
    pub epoch: usize,
    pub heads: Option<HeadsMeta>,
    pub params: Vec<ParamEntry>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn format_err(path: &Path, msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Format {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

fn entries(params: &ParamSet) -> Vec<ParamEntry> {
    params
        .names()
        .iter()
        .zip(params.tensors())
        .map(|(n, t)| ParamEntry {
            name: n.clone(),
            shape: t.shape().to_vec(),
        })
        .collect()
}

fn write_files(dir: &Path, meta: &impl Serialize, params: &ParamSet) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join(META_FILE);
    let text = serde_json::to_string_pretty(meta).expect("metadata serializes");
    fs::write(&path, text + "\n").map_err(io_err(&path))?;
    let mut bytes = Vec::with_capacity(8 * params.num_values());
    for t in params.tensors() {
        for v in t.values() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let path = dir.join(PARAMS_FILE);
    fs::write(&path, bytes).map_err(io_err(&path))
}

fn read_meta<T: for<'de> Deserialize<'de>>(dir: &Path) -> Result<T> {
    let path = dir.join(META_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|e| format_err(&path, e.to_string()))
}

fn read_params(dir: &Path, entries: &[ParamEntry]) -> Result<ParamSet> {
    let path = dir.join(PARAMS_FILE);
    let raw = fs::read(&path).map_err(io_err(&path))?;
    let total: usize = entries
        .iter()
        .map(|e| e.shape.iter().product::<usize>())
        .sum();
    if raw.len() != 8 * total {
        return Err(format_err(
            &path,
            format!("expected {} bytes, found {}", 8 * total, raw.len()),
        ));
    }
    let mut values = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut set = ParamSet::new();
    for e in entries {
        let n = e.shape.iter().product();
        let v: Vec<f64> = values.by_ref().take(n).collect();
        let t = Tensor::from_vec(e.shape.clone(), v)
            .map_err(|err| format_err(&path, format!("{}: {err}", e.name)))?;
        set.push(e.name.clone(), t);
    }
    Ok(set)
}

/// Writes `model` and the epoch its parameters come from.
pub fn save_model(model: &ExpertModel, epoch: usize, dir: impl AsRef<Path>) -> Result<()> {
    let meta = ModelMeta {
        kind: model.kind().to_string(),
        feature_dim: model.feature_dim(),
        num_classes: model.num_classes(),
        embedding_dim: model.embedding_dim(),
        seed: model.seed(),
        epoch,
        config: model.config().clone(),
        params: entries(model.params()),
    };
    write_files(dir.as_ref(), &meta, model.params())
}

/// Rebuilds a model from [`save_model`] output.
pub fn load_model(dir: impl AsRef<Path>) -> Result<(ExpertModel, ModelMeta)> {
    let dir = dir.as_ref();
    let meta: ModelMeta = read_meta(dir)?;
    if meta.kind != meta.config.kind.name() {
        return Err(format_err(
            &dir.join(META_FILE),
            format!(
                "kind {} disagrees with config {}",
                meta.kind, meta.config.kind
            ),
        ));
    }
    let mut model = ExpertModel::new(&meta.config, meta.feature_dim, meta.num_classes, meta.seed)?;
    let params = read_params(dir, &meta.params)?;
    model.params_mut().load(&params)?;
    Ok((model, meta))
}

/// Writes a fusion policy, including trained heads when present.
pub fn save_policy(
    policy: &FusionPolicy,
    epoch: usize,
    seed: u64,
    dir: impl AsRef<Path>,
) -> Result<()> {
    let empty = ParamSet::new();
    let params = policy.heads.as_ref().map_or(&empty, |h| &h.params);
    let meta = PolicyMeta {
        kind: "fusion".into(),
        num_classes: policy.num_classes(),
        strategy: policy.strategy,
        base_weights: policy.base_weights.clone(),
        alpha: policy.alpha.clone(),
        epoch,
        heads: policy.heads.as_ref().map(|h| HeadsMeta {
            gnn_dim: h.gnn_dim,
            gat_dim: h.gat_dim,
            proj_dim: h.proj_dim,
            seed,
        }),
        params: entries(params),
    };
    write_files(dir.as_ref(), &meta, params)
}

/// Rebuilds a policy from [`save_policy`] output.
pub fn load_policy(dir: impl AsRef<Path>) -> Result<(FusionPolicy, PolicyMeta)> {
    let dir = dir.as_ref();
    let meta: PolicyMeta = read_meta(dir)?;
    let bad = |msg: String| format_err(&dir.join(META_FILE), msg);
    if meta.kind != "fusion" {
        return Err(bad(format!("not a fusion policy (kind {})", meta.kind)));
    }
    let params = read_params(dir, &meta.params)?;
    let heads = match &meta.heads {
        Some(h) => {
            let mut heads =
                ProjectionHeads::new(h.gnn_dim, h.gat_dim, h.proj_dim, meta.num_classes, h.seed);
            heads.params.load(&params)?;
            Some(heads)
        }
        None if !params.is_empty() => {
            return Err(bad("parameters stored without head dimensions".into()))
        }
        None => None,
    };
    let policy = FusionPolicy {
        base_weights: meta.base_weights.clone(),
        alpha: meta.alpha.clone(),
        strategy: meta.strategy,
        heads,
    };
    policy.validate().map_err(|e| bad(e.to_string()))?;
    Ok((policy, meta))
}
