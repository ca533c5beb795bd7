//! Node classifiers: the GCN baseline, the residual layer-normalized GNN and
//! the multi-hop graph attention network.
//!
//! Every model owns a [`ParamSet`] (named tensors in declaration order) and
//! records its forward pass on a [`Tape`]. The forward pass exposes both the
//! class logits and the penultimate hidden representation, which the fusion
//! stage aligns across experts.

mod gat;
mod gcn;
mod residual;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{build_hopset, normalize_adjacency, GraphBundle, GraphError, HopSet};
use crate::sparse::SparseMatrix;
use crate::tensor::{DropoutKey, Tape, Tensor, TensorError, Var};

pub use gat::{gat_attention, AttentionHead, GatOutput, MultiHopGatModel};
pub use gcn::GcnModel;
pub use residual::ResidualGnnModel;

/// Slope of the LeakyReLU inside attention scores.
pub const ATTENTION_SLOPE: f64 = 0.2;
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("configuration: {0}")]
    Config(String),
    #[error("model expects {expected}, got {found}")]
    Mismatch { expected: String, found: String },
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "gcn")]
    Gcn,
    #[serde(rename = "gnn")]
    ResidualGnn,
    #[serde(rename = "mhgat")]
    MultiHopGat,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Gcn => "gcn",
            ModelKind::ResidualGnn => "gnn",
            ModelKind::MultiHopGat => "mhgat",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gcn" => Ok(ModelKind::Gcn),
            "gnn" => Ok(ModelKind::ResidualGnn),
            "mhgat" => Ok(ModelKind::MultiHopGat),
            other => Err(ModelError::Config(format!(
                "unknown model kind {other:?} (expected gcn, gnn or mhgat)"
            ))),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Hidden width (GCN / residual GNN) or per-head width (GAT).
    pub hidden: usize,
    pub dropout: f64,
    /// Attention heads (GAT only).
    pub heads: usize,
    /// Number of hop levels K (GAT only).
    pub hops: usize,
    /// Cap on neighbors per row for hops k >= 2 (GAT only).
    pub max_neighbors: usize,
}

impl ModelConfig {
    pub fn defaults(kind: ModelKind) -> Self {
        match kind {
            ModelKind::Gcn => ModelConfig {
                kind,
                hidden: 16,
                dropout: 0.5,
                heads: 1,
                hops: 1,
                max_neighbors: 64,
            },
            ModelKind::ResidualGnn => ModelConfig {
                kind,
                hidden: 64,
                dropout: 0.3,
                heads: 1,
                hops: 1,
                max_neighbors: 64,
            },
            ModelKind::MultiHopGat => ModelConfig {
                kind,
                hidden: 16,
                dropout: 0.6,
                heads: 2,
                hops: 2,
                max_neighbors: 64,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(ModelError::Config("hidden width must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if self.kind == ModelKind::MultiHopGat && (self.heads == 0 || self.hops == 0) {
            return Err(ModelError::Config(
                "GAT needs at least one head and one hop".into(),
            ));
        }
        Ok(())
    }

    /// Width of the representation returned by `embed`.
    pub fn embedding_dim(&self) -> usize {
        match self.kind {
            ModelKind::MultiHopGat => self.hidden * self.heads,
            _ => self.hidden,
        }
    }
}

/// Named parameter tensors in a fixed declaration order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Records every parameter as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.leaf(t.clone())).collect()
    }

    /// Replaces all values, checking names and shapes.
    pub fn load(&mut self, other: &ParamSet) -> Result<()> {
        if self.names != other.names {
            return Err(ModelError::Mismatch {
                expected: format!("{:?}", self.names),
                found: format!("{:?}", other.names),
            });
        }
        for (mine, theirs) in self.tensors.iter().zip(&other.tensors) {
            if mine.shape() != theirs.shape() {
                return Err(ModelError::Mismatch {
                    expected: format!("{:?}", mine.shape()),
                    found: format!("{:?}", theirs.shape()),
                });
            }
        }
        self.tensors = other.tensors.clone();
        Ok(())
    }
}

/// Training or evaluation pass. Dropout is active only in training, keyed by
/// the epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    Train { epoch: u64 },
}

impl Mode {
    pub fn is_train(self) -> bool {
        matches!(self, Mode::Train { .. })
    }

    pub(crate) fn dropout(
        self,
        tape: &mut Tape,
        x: Var,
        rate: f64,
        seed: u64,
        layer: u64,
    ) -> Result<Var> {
        match self {
            Mode::Eval => Ok(x),
            Mode::Train { epoch } => {
                Ok(tape.dropout(x, rate, true, DropoutKey::new(seed, epoch, layer))?)
            }
        }
    }
}

/// Precomputed propagation structure for a bundle.
#[derive(Debug, Clone)]
pub struct Structure {
    pub adjacency: Arc<SparseMatrix>,
    pub hops: Option<HopSet>,
}

impl Structure {
    pub fn for_model(bundle: &GraphBundle, config: &ModelConfig) -> Result<Self> {
        match config.kind {
            ModelKind::MultiHopGat => {
                let hops = build_hopset(
                    bundle.edges(),
                    bundle.num_nodes(),
                    config.hops,
                    config.max_neighbors,
                )?;
                Ok(Structure {
                    adjacency: Arc::clone(hops.hop(1)),
                    hops: Some(hops),
                })
            }
            _ => Ok(Structure {
                adjacency: Arc::new(normalize_adjacency(bundle.edges(), bundle.num_nodes())),
                hops: None,
            }),
        }
    }
}

/// Output of a recorded forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub logits: Var,
    pub embedding: Var,
    pub params: Vec<Var>,
}

/// One of the three expert architectures.
#[derive(Debug, Clone, PartialEq)]
pub enum ExpertModel {
    Gcn(GcnModel),
    ResidualGnn(ResidualGnnModel),
    MultiHopGat(MultiHopGatModel),
}

impl ExpertModel {
    /// Glorot-initialized model for the given dimensions.
    pub fn new(
        config: &ModelConfig,
        feature_dim: usize,
        num_classes: usize,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(match config.kind {
            ModelKind::Gcn => ExpertModel::Gcn(GcnModel::new(
                config,
                feature_dim,
                num_classes,
                seed,
                &mut rng,
            )),
            ModelKind::ResidualGnn => ExpertModel::ResidualGnn(ResidualGnnModel::new(
                config,
                feature_dim,
                num_classes,
                seed,
                &mut rng,
            )),
            ModelKind::MultiHopGat => ExpertModel::MultiHopGat(MultiHopGatModel::new(
                config,
                feature_dim,
                num_classes,
                seed,
                &mut rng,
            )),
        })
    }

    pub fn for_bundle(config: &ModelConfig, bundle: &GraphBundle, seed: u64) -> Result<Self> {
        ExpertModel::new(config, bundle.feature_dim(), bundle.num_classes(), seed)
    }

    pub fn config(&self) -> &ModelConfig {
        match self {
            ExpertModel::Gcn(m) => &m.config,
            ExpertModel::ResidualGnn(m) => &m.config,
            ExpertModel::MultiHopGat(m) => &m.config,
        }
    }

    pub fn kind(&self) -> ModelKind {
        self.config().kind
    }

    pub fn seed(&self) -> u64 {
        match self {
            ExpertModel::Gcn(m) => m.seed,
            ExpertModel::ResidualGnn(m) => m.seed,
            ExpertModel::MultiHopGat(m) => m.seed,
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            ExpertModel::Gcn(m) => m.feature_dim,
            ExpertModel::ResidualGnn(m) => m.feature_dim,
            ExpertModel::MultiHopGat(m) => m.feature_dim,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            ExpertModel::Gcn(m) => m.num_classes,
            ExpertModel::ResidualGnn(m) => m.num_classes,
            ExpertModel::MultiHopGat(m) => m.num_classes,
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.config().embedding_dim()
    }

    pub fn params(&self) -> &ParamSet {
        match self {
            ExpertModel::Gcn(m) => &m.params,
            ExpertModel::ResidualGnn(m) => &m.params,
            ExpertModel::MultiHopGat(m) => &m.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        match self {
            ExpertModel::Gcn(m) => &mut m.params,
            ExpertModel::ResidualGnn(m) => &mut m.params,
            ExpertModel::MultiHopGat(m) => &mut m.params,
        }
    }

    /// Records a forward pass with the given parameter leaves.
    pub fn forward_with(
        &self,
        tape: &mut Tape,
        params: &[Var],
        features: Var,
        structure: &Structure,
        mode: Mode,
    ) -> Result<(Var, Var)> {
        match self {
            ExpertModel::Gcn(m) => m.forward_with(tape, params, features, structure, mode),
            ExpertModel::ResidualGnn(m) => m.forward_with(tape, params, features, structure, mode),
            ExpertModel::MultiHopGat(m) => m.forward_with(tape, params, features, structure, mode),
        }
    }

    /// Binds the parameters and records a forward pass over the bundle.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bundle: &GraphBundle,
        structure: &Structure,
        mode: Mode,
    ) -> Result<ForwardPass> {
        self.check_bundle(bundle)?;
        let params = self.params().bind(tape);
        let x = tape.constant_arc(Arc::clone(bundle.features()));
        let (logits, embedding) = self.forward_with(tape, &params, x, structure, mode)?;
        Ok(ForwardPass {
            logits,
            embedding,
            params,
        })
    }

    /// Eval-mode logits and embedding.
    pub fn infer(&self, bundle: &GraphBundle, structure: &Structure) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let pass = self.forward(&mut tape, bundle, structure, Mode::Eval)?;
        Ok((
            tape.value(pass.logits).clone(),
            tape.value(pass.embedding).clone(),
        ))
    }

    pub fn logits(&self, bundle: &GraphBundle, structure: &Structure) -> Result<Tensor> {
        Ok(self.infer(bundle, structure)?.0)
    }

    /// Eval-mode class probabilities (row softmax of the logits).
    pub fn predict_proba(&self, bundle: &GraphBundle, structure: &Structure) -> Result<Tensor> {
        let mut tape = Tape::new();
        let pass = self.forward(&mut tape, bundle, structure, Mode::Eval)?;
        let p = tape.row_softmax(pass.logits, None)?;
        Ok(tape.value(p).clone())
    }

    /// Penultimate hidden representation, `n × embedding_dim`.
    pub fn embed(&self, bundle: &GraphBundle, structure: &Structure) -> Result<Tensor> {
        Ok(self.infer(bundle, structure)?.1)
    }

    pub fn check_bundle(&self, bundle: &GraphBundle) -> Result<()> {
        if bundle.feature_dim() != self.feature_dim() || bundle.num_classes() != self.num_classes()
        {
            return Err(ModelError::Mismatch {
                expected: format!(
                    "{} features / {} classes",
                    self.feature_dim(),
                    self.num_classes()
                ),
                found: format!(
                    "{} features / {} classes",
                    bundle.feature_dim(),
                    bundle.num_classes()
                ),
            });
        }
        Ok(())
    }
}

pub(crate) fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    Tensor::glorot_uniform(fan_in, fan_out, rng)
}

#[cfg(test)]
mod tests;
