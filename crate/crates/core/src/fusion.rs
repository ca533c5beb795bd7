//! Combining two experts' class probabilities.
//!
//! Three strategies share one output type:
//!
//! - [`fixed_fuse`] applies per-class base weights.
//! - [`adaptive_fuse`] weighs each node by the experts' confidences.
//! - [`wr_fuse`] refines each expert's logits with class-specific projection
//!   heads (trained with a transport alignment term, see [`train_wr_heads`])
//!   and mixes base weights with confidences per class.
//!
//! The first expert is the residual GNN, the second the multi-hop GAT.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{GraphBundle, Split};
use crate::models::{glorot, ExpertModel, ModelError, ParamSet, Structure};
use crate::tensor::{splitmix64, Tape, Tensor, TensorError, Var};
use crate::train::{self, accuracy, evaluate, History, MetricsReport, TrainConfig, TrainError};
use crate::transport::{
    self, class_wr_loss, sample_class_nodes, DiscreteCloud, TransportError, WrLossConfig,
};

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("input: {0}")]
    Input(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

pub type Result<T> = std::result::Result<T, FusionError>;

/// Fusion strategy. The declaration order is the tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Fixed,
    Adaptive,
    Wr,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Fixed, Strategy::Adaptive, Strategy::Wr];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Fixed => "fixed",
            Strategy::Adaptive => "adaptive",
            Strategy::Wr => "wr",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = FusionError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(Strategy::Fixed),
            "adaptive" => Ok(Strategy::Adaptive),
            "wr" => Ok(Strategy::Wr),
            other => Err(FusionError::Config(format!(
                "unknown strategy {other:?} (expected fixed, adaptive or wr)"
            ))),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// What fusion needs from a trained expert, computed once in eval mode.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertOutputs {
    pub logits: Tensor,
    pub probs: Tensor,
    pub embedding: Tensor,
}

impl ExpertOutputs {
    pub fn from_model(
        model: &ExpertModel,
        bundle: &GraphBundle,
        structure: &Structure,
    ) -> Result<Self> {
        let (logits, embedding) = model.infer(bundle, structure)?;
        Ok(ExpertOutputs {
            probs: softmax_rows(&logits),
            logits,
            embedding,
        })
    }
}

fn softmax_rows(logits: &Tensor) -> Tensor {
    let c = logits.cols();
    let mut v = logits.values().to_vec();
    for row in v.chunks_mut(c) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.iter_mut().for_each(|x| *x = (*x - max).exp());
        let z: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= z);
    }
    Tensor::from_vec(logits.shape().to_vec(), v).expect("same shape")
}

/// Class-specific projection heads.
///
/// For class `c` and expert `m`, `Proj_{c,m}(e) = relu(e W1) W2` maps the
/// expert's embedding to a shared `proj_dim` space, and a readout vector
/// `u_c`, shared by both experts, adds `Proj_{c,m}(e) · u_c` to the expert's
/// class-`c` logit. `u_c` starts at zero, so untrained heads leave the experts
/// unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHeads {
    pub gnn_dim: usize,
    pub gat_dim: usize,
    pub proj_dim: usize,
    pub num_classes: usize,
    pub params: ParamSet,
}

const PARAMS_PER_CLASS: usize = 5;

impl ProjectionHeads {
    pub fn new(
        gnn_dim: usize,
        gat_dim: usize,
        proj_dim: usize,
        num_classes: usize,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0x7072_6f6a));
        let mut params = ParamSet::new();
        for c in 0..num_classes {
            params.push(
                format!("proj{c}.gnn.w1"),
                glorot(&mut rng, gnn_dim, gnn_dim),
            );
            params.push(
                format!("proj{c}.gnn.w2"),
                glorot(&mut rng, gnn_dim, proj_dim),
            );
            params.push(
                format!("proj{c}.gat.w1"),
                glorot(&mut rng, gat_dim, gat_dim),
            );
            params.push(
                format!("proj{c}.gat.w2"),
                glorot(&mut rng, gat_dim, proj_dim),
            );
            params.push(format!("proj{c}.readout"), Tensor::zeros(&[proj_dim, 1]));
        }
        ProjectionHeads {
            gnn_dim,
            gat_dim,
            proj_dim,
            num_classes,
            params,
        }
    }
}

/// Records the projected embeddings and the refined probabilities of both
/// experts.
struct HeadPass {
    /// `[class][expert]` projected embeddings, `n × proj_dim`.
    projected: Vec<[Var; 2]>,
    probs: [Var; 2],
}

fn head_pass(
    tape: &mut Tape,
    heads: &ProjectionHeads,
    p: &[Var],
    gnn: &ExpertOutputs,
    gat: &ExpertOutputs,
) -> Result<HeadPass> {
    let experts = [gnn, gat];
    let emb = experts.map(|e| tape.constant(e.embedding.clone()));
    let mut projected = Vec::with_capacity(heads.num_classes);
    let mut corrections: [Vec<Var>; 2] = [Vec::new(), Vec::new()];
    for c in 0..heads.num_classes {
        let base = PARAMS_PER_CLASS * c;
        let readout = p[base + 4];
        let mut pair = [emb[0]; 2];
        for m in 0..2 {
            let h = tape.matmul(emb[m], p[base + 2 * m])?;
            let h = tape.relu(h);
            let z = tape.matmul(h, p[base + 2 * m + 1])?;
            corrections[m].push(tape.matmul(z, readout)?);
            pair[m] = z;
        }
        projected.push(pair);
    }
    let mut probs = [emb[0]; 2];
    for m in 0..2 {
        let shift = tape.concat_cols(&corrections[m])?;
        let raw = tape.constant(experts[m].logits.clone());
        let logits = tape.add(raw, shift)?;
        probs[m] = tape.row_softmax(logits, None)?;
    }
    Ok(HeadPass { projected, probs })
}

/// Learned and fixed parts of a fusion rule.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionPolicy {
    /// Per class `(w_gnn, w_gat)`, each pair summing to 1.
    pub base_weights: Vec<[f64; 2]>,
    /// Per-class balance between base weights (1) and confidences (0).
    pub alpha: Vec<f64>,
    pub strategy: Strategy,
    pub heads: Option<ProjectionHeads>,
}

impl FusionPolicy {
    /// Base weights `(0.95, 0.05)` for every class except the last of three,
    /// which leans on the attention expert with `(0.2, 0.8)`; `α_c = 0.7`.
    pub fn defaults(num_classes: usize) -> Self {
        let base_weights = (0..num_classes)
            .map(|c| {
                if num_classes == 3 && c == 2 {
                    [0.2, 0.8]
                } else {
                    [0.95, 0.05]
                }
            })
            .collect();
        FusionPolicy {
            base_weights,
            alpha: vec![0.7; num_classes],
            strategy: Strategy::Fixed,
            heads: None,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.base_weights.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.base_weights.len();
        if c == 0 || self.alpha.len() != c {
            return Err(FusionError::Config(format!(
                "{} base weight pairs but {} balance factors",
                c,
                self.alpha.len()
            )));
        }
        for (k, w) in self.base_weights.iter().enumerate() {
            if w.iter().any(|v| !(0.0..=1.0).contains(v)) || (w[0] + w[1] - 1.0).abs() > 1e-12 {
                return Err(FusionError::Config(format!(
                    "class {k} base weights {w:?} must be a distribution"
                )));
            }
        }
        if self.alpha.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(FusionError::Config(
                "balance factors must lie in [0, 1]".into(),
            ));
        }
        if let Some(h) = &self.heads {
            if h.num_classes != c {
                return Err(FusionError::Config(format!(
                    "heads cover {} classes, policy {c}",
                    h.num_classes
                )));
            }
        }
        Ok(())
    }
}

/// Fused class probabilities and the weights that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedPrediction {
    pub probs: Tensor,
    /// `n × C` weights applied to the first and second expert.
    pub weights: [Tensor; 2],
    pub strategy: Strategy,
}

impl FusedPrediction {
    /// Mean applied weight of `expert` (0 or 1) on class column `class`.
    pub fn mean_weight(&self, expert: usize, class: usize) -> f64 {
        let w = &self.weights[expert];
        (0..w.rows()).map(|i| w.get(i, class)).sum::<f64>() / w.rows() as f64
    }
}

fn check_stochastic(name: &str, p: &Tensor) -> Result<()> {
    if p.shape().len() != 2 || p.rows() == 0 {
        return Err(FusionError::Input(format!(
            "{name} must be a non-empty matrix"
        )));
    }
    for i in 0..p.rows() {
        let row = p.row(i);
        if row.iter().any(|v| v.is_nan() || *v < 0.0) {
            return Err(FusionError::Input(format!(
                "{name} row {i} has negative or NaN entries"
            )));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(FusionError::Input(format!("{name} row {i} sums to {s}")));
        }
    }
    Ok(())
}

fn check_pair(p_gnn: &Tensor, p_gat: &Tensor) -> Result<()> {
    if p_gnn.shape() != p_gat.shape() {
        return Err(FusionError::Input(format!(
            "probability shapes differ: {:?} vs {:?}",
            p_gnn.shape(),
            p_gat.shape()
        )));
    }
    check_stochastic("first expert", p_gnn)?;
    check_stochastic("second expert", p_gat)
}

/// `fused[i][c] ∝ w[0][i][c]·p_gnn[i][c] + w[1][i][c]·p_gat[i][c]`.
fn combine(
    p_gnn: &Tensor,
    p_gat: &Tensor,
    weights: [Tensor; 2],
    strategy: Strategy,
) -> FusedPrediction {
    let c = p_gnn.cols();
    let mut v: Vec<f64> = (0..p_gnn.len())
        .map(|k| {
            weights[0].values()[k] * p_gnn.values()[k] + weights[1].values()[k] * p_gat.values()[k]
        })
        .collect();
    for row in v.chunks_mut(c) {
        let s: f64 = row.iter().sum();
        // rows already stochastic to rounding are left bit-for-bit alone
        if s > 0.0 && (s - 1.0).abs() > 8.0 * f64::EPSILON {
            row.iter_mut().for_each(|x| *x /= s);
        }
    }
    FusedPrediction {
        probs: Tensor::from_vec(p_gnn.shape().to_vec(), v).expect("same shape"),
        weights,
        strategy,
    }
}

fn confidence_shares(p_gnn: &Tensor, p_gat: &Tensor) -> Vec<[f64; 2]> {
    (0..p_gnn.rows())
        .map(|i| {
            let cg = p_gnn.row(i).iter().copied().fold(0.0, f64::max);
            let ca = p_gat.row(i).iter().copied().fold(0.0, f64::max);
            [cg / (cg + ca), ca / (cg + ca)]
        })
        .collect()
}

fn weight_tensors(n: usize, c: usize, f: impl Fn(usize, usize) -> [f64; 2]) -> [Tensor; 2] {
    let mut w0 = Vec::with_capacity(n * c);
    let mut w1 = Vec::with_capacity(n * c);
    for i in 0..n {
        for k in 0..c {
            let [a, b] = f(i, k);
            w0.push(a);
            w1.push(b);
        }
    }
    [
        Tensor::from_vec(vec![n, c], w0).expect("n x c"),
        Tensor::from_vec(vec![n, c], w1).expect("n x c"),
    ]
}

/// Per-class base weights, then row renormalization.
pub fn fixed_fuse(
    p_gnn: &Tensor,
    p_gat: &Tensor,
    policy: &FusionPolicy,
) -> Result<FusedPrediction> {
    check_pair(p_gnn, p_gat)?;
    policy.validate()?;
    let (n, c) = (p_gnn.rows(), p_gnn.cols());
    if policy.num_classes() != c {
        return Err(FusionError::Input(format!(
            "policy has {} classes, inputs {c}",
            policy.num_classes()
        )));
    }
    let weights = weight_tensors(n, c, |_, k| policy.base_weights[k]);
    Ok(combine(p_gnn, p_gat, weights, Strategy::Fixed))
}

/// Per-node weights proportional to each expert's top probability.
pub fn adaptive_fuse(p_gnn: &Tensor, p_gat: &Tensor) -> Result<FusedPrediction> {
    check_pair(p_gnn, p_gat)?;
    let (n, c) = (p_gnn.rows(), p_gnn.cols());
    let shares = confidence_shares(p_gnn, p_gat);
    let weights = weight_tensors(n, c, |i, _| shares[i]);
    Ok(combine(p_gnn, p_gat, weights, Strategy::Adaptive))
}

/// `w_{m,c} = α_c·base_{m,c} + (1−α_c)·share_m`, renormalized over experts,
/// applied to the given probabilities without any projection.
pub fn balanced_fuse(
    p_gnn: &Tensor,
    p_gat: &Tensor,
    policy: &FusionPolicy,
) -> Result<FusedPrediction> {
    check_pair(p_gnn, p_gat)?;
    policy.validate()?;
    let c = p_gnn.cols();
    if policy.num_classes() != c {
        return Err(FusionError::Input(format!(
            "policy has {} classes, inputs {c}",
            policy.num_classes()
        )));
    }
    let weights = balanced_weights(p_gnn, p_gat, policy);
    Ok(combine(p_gnn, p_gat, weights, Strategy::Wr))
}

fn balanced_weights(p_gnn: &Tensor, p_gat: &Tensor, policy: &FusionPolicy) -> [Tensor; 2] {
    let shares = confidence_shares(p_gnn, p_gat);
    weight_tensors(p_gnn.rows(), p_gnn.cols(), |i, k| {
        let (a, base) = (policy.alpha[k], policy.base_weights[k]);
        let w0 = a * base[0] + (1.0 - a) * shares[i][0];
        let w1 = a * base[1] + (1.0 - a) * shares[i][1];
        [w0 / (w0 + w1), w1 / (w0 + w1)]
    })
}

/// Refines both experts through the policy's projection heads, then applies
/// [`balanced_fuse`] weighting.
pub fn wr_fuse(
    gnn: &ExpertOutputs,
    gat: &ExpertOutputs,
    policy: &FusionPolicy,
) -> Result<FusedPrediction> {
    let heads = policy
        .heads
        .as_ref()
        .ok_or_else(|| FusionError::Config("wr fusion needs trained projection heads".into()))?;
    check_heads(heads, gnn, gat)?;
    let (p_gnn, p_gat) = projected_probs(heads, gnn, gat)?;
    balanced_fuse(&p_gnn, &p_gat, policy)
}

fn check_heads(heads: &ProjectionHeads, gnn: &ExpertOutputs, gat: &ExpertOutputs) -> Result<()> {
    if gnn.embedding.cols() != heads.gnn_dim || gat.embedding.cols() != heads.gat_dim {
        return Err(FusionError::Input(format!(
            "heads expect embeddings of width {} and {}, got {} and {}",
            heads.gnn_dim,
            heads.gat_dim,
            gnn.embedding.cols(),
            gat.embedding.cols()
        )));
    }
    if gnn.logits.cols() != heads.num_classes || gat.logits.cols() != heads.num_classes {
        return Err(FusionError::Input(
            "expert class count differs from heads".into(),
        ));
    }
    Ok(())
}

fn projected_probs(
    heads: &ProjectionHeads,
    gnn: &ExpertOutputs,
    gat: &ExpertOutputs,
) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let p: Vec<Var> = heads
        .params
        .tensors()
        .iter()
        .map(|t| tape.constant(t.clone()))
        .collect();
    let pass = head_pass(&mut tape, heads, &p, gnn, gat)?;
    Ok((
        tape.value(pass.probs[0]).clone(),
        tape.value(pass.probs[1]).clone(),
    ))
}

/// Fuses with whichever strategy the policy names.
pub fn fuse(
    gnn: &ExpertOutputs,
    gat: &ExpertOutputs,
    policy: &FusionPolicy,
) -> Result<FusedPrediction> {
    match policy.strategy {
        Strategy::Fixed => fixed_fuse(&gnn.probs, &gat.probs, policy),
        Strategy::Adaptive => adaptive_fuse(&gnn.probs, &gat.probs),
        Strategy::Wr => wr_fuse(gnn, gat, policy),
    }
}

/// Settings of projection-head training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    /// Per-class weight λ_c of the transport alignment term.
    pub lambda: Vec<f64>,
    pub transport: WrLossConfig,
    pub train: TrainConfig,
    /// Width of the shared projection space; defaults to the smaller
    /// embedding width.
    pub proj_dim: Option<usize>,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            lambda: vec![0.01, 0.01, 0.1],
            transport: WrLossConfig::default(),
            train: TrainConfig {
                max_epochs: 200,
                patience: 30,
                ..TrainConfig::default()
            },
            proj_dim: None,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.lambda.len() != num_classes {
            return Err(FusionError::Config(format!(
                "{} transport weights for {num_classes} classes",
                self.lambda.len()
            )));
        }
        if self.lambda.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(FusionError::Config(
                "transport weights must be finite and >= 0".into(),
            ));
        }
        if self.proj_dim == Some(0) {
            return Err(FusionError::Config(
                "projection width must be positive".into(),
            ));
        }
        self.transport.sinkhorn.validate()?;
        self.train.validate()?;
        Ok(())
    }
}

fn check_experts(gnn: &ExpertOutputs, gat: &ExpertOutputs, bundle: &GraphBundle) -> Result<()> {
    let (n, c) = (bundle.num_nodes(), bundle.num_classes());
    for (name, e) in [("first", gnn), ("second", gat)] {
        if e.logits.shape() != [n, c] || e.embedding.rows() != n {
            return Err(FusionError::Input(format!(
                "{name} expert outputs {:?} do not match {n} nodes x {c} classes",
                e.logits.shape()
            )));
        }
    }
    Ok(())
}

/// Trains projection heads on the training nodes with the experts frozen.
///
/// Loss: cross-entropy of the fused prediction (weights held constant per
/// step) plus `Σ_c λ_c · W(Proj_{c,gnn}(e_gnn), Proj_{c,gat}(e_gat))` over
/// each class's training nodes. Early stopping keeps the heads with the best
/// validation accuracy of [`wr_fuse`]; the untrained heads, which reproduce
/// [`balanced_fuse`] on the raw experts, are a candidate.
pub fn train_wr_heads(
    gnn: &ExpertOutputs,
    gat: &ExpertOutputs,
    bundle: &GraphBundle,
    policy: &FusionPolicy,
    cfg: &FusionConfig,
) -> Result<(FusionPolicy, History)> {
    check_experts(gnn, gat, bundle)?;
    policy.validate()?;
    let c = bundle.num_classes();
    cfg.validate(c)?;
    if policy.num_classes() != c {
        return Err(FusionError::Config(format!(
            "policy has {} classes, bundle {c}",
            policy.num_classes()
        )));
    }
    let heads = match &policy.heads {
        Some(h) => {
            check_heads(h, gnn, gat)?;
            h.clone()
        }
        None => {
            let d = cfg
                .proj_dim
                .unwrap_or(gnn.embedding.cols().min(gat.embedding.cols()));
            ProjectionHeads::new(
                gnn.embedding.cols(),
                gat.embedding.cols(),
                d,
                c,
                cfg.train.seed,
            )
        }
    };
    let train_rows = bundle.train_nodes();
    let val_rows = bundle.val_nodes();
    if train_rows.is_empty() || val_rows.is_empty() {
        return Err(FusionError::Input(
            "training and validation masks must be non-empty".into(),
        ));
    }
    let labels = bundle.labels();
    let mut params = heads.params.clone();
    let mut candidate = policy.clone();
    candidate.strategy = Strategy::Wr;
    let history = train::fit(
        &mut params,
        &cfg.train,
        |tape, vars, epoch| {
            let pass = head_pass(tape, &heads, vars, gnn, gat).map_err(into_train)?;
            let (pg, pa) = (
                tape.value(pass.probs[0]).clone(),
                tape.value(pass.probs[1]).clone(),
            );
            let [w0, w1] = balanced_weights(&pg, &pa, policy);
            let (w0, w1) = (tape.constant(w0), tape.constant(w1));
            let a = tape.mul(w0, pass.probs[0])?;
            let b = tape.mul(w1, pass.probs[1])?;
            let mixed = tape.add(a, b)?;
            let fused = tape.row_normalize(mixed)?;
            let logp = tape.log(fused)?;
            let mut loss = tape.masked_nll(
                logp,
                &train_rows,
                labels,
                cfg.train.class_weights.as_deref(),
            )?;
            for (k, &lambda) in cfg.lambda.iter().enumerate() {
                if lambda == 0.0 {
                    continue;
                }
                let [zg, za] = pass.projected[k];
                let wr = class_wr_loss(tape, zg, za, labels, &train_rows, k, &cfg.transport, epoch)
                    .map_err(|e| into_train(e.into()))?;
                let term = tape.scale(wr, lambda);
                loss = tape.add(loss, term)?;
            }
            Ok(loss)
        },
        |p| {
            let mut h = heads.clone();
            h.params.load(p)?;
            let (pg, pa) = projected_probs(&h, gnn, gat).map_err(into_train)?;
            let fused = balanced_fuse(&pg, &pa, policy).map_err(into_train)?;
            Ok(accuracy(&fused.probs, labels, &val_rows))
        },
    )?;
    let mut trained = heads;
    trained.params.load(&params)?;
    candidate.heads = Some(trained);
    Ok((candidate, history))
}

fn into_train(e: FusionError) -> TrainError {
    match e {
        FusionError::Train(t) => t,
        FusionError::Tensor(t) => TrainError::Tensor(t),
        FusionError::Model(m) => TrainError::Model(m),
        other => TrainError::Contract(other.to_string()),
    }
}

/// Transport distance between the two experts' projected embeddings of the
/// training nodes of `class_id`, as sampled at epoch 0.
pub fn class_wr_distance(
    heads: &ProjectionHeads,
    gnn: &ExpertOutputs,
    gat: &ExpertOutputs,
    bundle: &GraphBundle,
    class_id: usize,
    cfg: &WrLossConfig,
) -> Result<f64> {
    check_heads(heads, gnn, gat)?;
    let mut tape = Tape::new();
    let p: Vec<Var> = heads
        .params
        .tensors()
        .iter()
        .map(|t| tape.constant(t.clone()))
        .collect();
    let pass = head_pass(&mut tape, heads, &p, gnn, gat)?;
    let nodes = sample_class_nodes(
        bundle.labels(),
        &bundle.train_nodes(),
        class_id,
        cfg.sample_size,
        cfg.seed,
        0,
    );
    if nodes.len() < 2 {
        return Ok(0.0);
    }
    let [zg, za] = pass.projected[class_id];
    let a = DiscreteCloud::uniform(tape.value(zg).select_rows(&nodes))?;
    let b = DiscreteCloud::uniform(tape.value(za).select_rows(&nodes))?;
    Ok(transport::sinkhorn_wr(&a, &b, &cfg.sinkhorn)?.0)
}

/// Validation score of one candidate strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyScore {
    pub strategy: Strategy,
    pub val: MetricsReport,
    pub test: MetricsReport,
}

/// Evaluates every candidate and returns the policy switched to the winner:
/// highest validation accuracy, then lower validation CV, then the order
/// fixed < adaptive < wr. Candidate `wr` requires trained heads.
pub fn select_strategy(
    candidates: &[Strategy],
    policy: &FusionPolicy,
    gnn: &ExpertOutputs,
    gat: &ExpertOutputs,
    bundle: &GraphBundle,
) -> Result<(FusionPolicy, Vec<StrategyScore>)> {
    if candidates.is_empty() {
        return Err(FusionError::Config("no candidate strategies".into()));
    }
    check_experts(gnn, gat, bundle)?;
    let mut scores = Vec::with_capacity(candidates.len());
    for &s in candidates {
        let mut p = policy.clone();
        p.strategy = s;
        let fused = fuse(gnn, gat, &p)?;
        scores.push(StrategyScore {
            strategy: s,
            val: evaluate(&fused.probs, bundle, Split::Val)?,
            test: evaluate(&fused.probs, bundle, Split::Test)?,
        });
    }
    let best = pick_best(&scores);
    let mut chosen = policy.clone();
    chosen.strategy = best;
    Ok((chosen, scores))
}

/// Grid of balance factors tried by [`tune_balance`].
pub const BALANCE_GRID: [f64; 11] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];

/// Picks each class's balance factor α_c from [`BALANCE_GRID`] by validation
/// accuracy of [`balanced_fuse`] on the given probabilities.
///
/// Coordinate ascent, classes in order, `sweeps` passes. A value replaces the
/// current one only if it raises validation accuracy, or keeps it and lowers
/// validation CV. Starting from the policy's own factors, so the result never
/// scores below them on validation.
pub fn tune_balance(
    p_gnn: &Tensor,
    p_gat: &Tensor,
    bundle: &GraphBundle,
    policy: &FusionPolicy,
    sweeps: usize,
) -> Result<FusionPolicy> {
    check_pair(p_gnn, p_gat)?;
    policy.validate()?;
    if policy.num_classes() != p_gnn.cols() || p_gnn.rows() != bundle.num_nodes() {
        return Err(FusionError::Input(
            "probabilities do not match the bundle and policy".into(),
        ));
    }
    let score = |p: &FusionPolicy| -> Result<(f64, f64)> {
        let fused = balanced_fuse(p_gnn, p_gat, p)?;
        let r = evaluate(&fused.probs, bundle, Split::Val)?;
        Ok((r.accuracy, r.cv.unwrap_or(f64::INFINITY)))
    };
    let mut best = policy.clone();
    let mut best_score = score(&best)?;
    for _ in 0..sweeps {
        let mut changed = false;
        for c in 0..best.num_classes() {
            for &a in &BALANCE_GRID {
                if a == best.alpha[c] {
                    continue;
                }
                let mut trial = best.clone();
                trial.alpha[c] = a;
                let s = score(&trial)?;
                if s.0 > best_score.0 || (s.0 == best_score.0 && s.1 < best_score.1) {
                    best = trial;
                    best_score = s;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    Ok(best)
}

/// End-to-end fusion settings: which strategies compete and how the wr
/// candidate is built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionPlan {
    pub strategies: Vec<Strategy>,
    /// Train projection heads for wr. When off, wr uses untrained heads,
    /// which leave both experts unchanged.
    pub projection: bool,
    /// Tune α_c on validation before head training.
    pub tune_balance: bool,
    /// Overrides the default per-class base weights.
    pub base_weights: Option<Vec<[f64; 2]>>,
    /// Overrides the default per-class balance factors.
    pub alpha: Option<Vec<f64>>,
    pub heads: FusionConfig,
}

impl Default for FusionPlan {
    fn default() -> Self {
        FusionPlan {
            strategies: vec![Strategy::Fixed, Strategy::Adaptive],
            projection: true,
            tune_balance: true,
            base_weights: None,
            alpha: None,
            heads: FusionConfig::default(),
        }
    }
}

impl FusionPlan {
    /// All three strategies, heads trained with the default settings.
    pub fn full() -> Self {
        FusionPlan {
            strategies: Strategy::ALL.to_vec(),
            ..FusionPlan::default()
        }
    }

    /// The starting policy before tuning.
    pub fn base_policy(&self, num_classes: usize) -> Result<FusionPolicy> {
        let mut policy = FusionPolicy::defaults(num_classes);
        if let Some(w) = &self.base_weights {
            policy.base_weights = w.clone();
        }
        if let Some(a) = &self.alpha {
            policy.alpha = a.clone();
        }
        policy.validate()?;
        if policy.num_classes() != num_classes {
            return Err(FusionError::Config(format!(
                "fusion settings cover {} classes, data has {num_classes}",
                policy.num_classes()
            )));
        }
        Ok(policy)
    }
}

/// Outcome of [`run_fusion`].
#[derive(Debug, Clone)]
pub struct FusionRun {
    /// The policy switched to the selected strategy.
    pub policy: FusionPolicy,
    pub scores: Vec<StrategyScore>,
    /// Head training log, when heads were trained.
    pub history: Option<History>,
}

impl FusionRun {
    pub fn score(&self, strategy: Strategy) -> Option<&StrategyScore> {
        self.scores.iter().find(|s| s.strategy == strategy)
    }
}

/// Tunes the balance factors, trains heads if wr competes, then selects a
/// strategy on validation.
pub fn run_fusion(
    gnn: &ExpertOutputs,
    gat: &ExpertOutputs,
    bundle: &GraphBundle,
    plan: &FusionPlan,
) -> Result<FusionRun> {
    check_experts(gnn, gat, bundle)?;
    let c = bundle.num_classes();
    plan.heads.validate(c)?;
    let mut policy = plan.base_policy(c)?;
    if plan.tune_balance {
        policy = tune_balance(&gnn.probs, &gat.probs, bundle, &policy, 3)?;
        log::info!("tuned balance factors {:?}", policy.alpha);
    }
    let mut history = None;
    if plan.strategies.contains(&Strategy::Wr) {
        if plan.projection {
            let (trained, h) = train_wr_heads(gnn, gat, bundle, &policy, &plan.heads)?;
            log::info!(
                "heads: best epoch {} val {:.4} (untrained {:.4})",
                h.best_epoch,
                h.best_val_acc,
                h.initial_val_acc
            );
            policy = trained;
            history = Some(h);
        } else {
            let d = plan
                .heads
                .proj_dim
                .unwrap_or(gnn.embedding.cols().min(gat.embedding.cols()));
            policy.heads = Some(ProjectionHeads::new(
                gnn.embedding.cols(),
                gat.embedding.cols(),
                d,
                c,
                plan.heads.train.seed,
            ));
        }
    }
    let (policy, scores) = select_strategy(&plan.strategies, &policy, gnn, gat, bundle)?;
    Ok(FusionRun {
        policy,
        scores,
        history,
    })
}

fn pick_best(scores: &[StrategyScore]) -> Strategy {
    let cv = |s: &StrategyScore| s.val.cv.unwrap_or(f64::INFINITY);
    scores
        .iter()
        .min_by(|a, b| {
            b.val
                .accuracy
                .total_cmp(&a.val.accuracy)
                .then(cv(a).total_cmp(&cv(b)))
                .then(a.strategy.cmp(&b.strategy))
        })
        .expect("non-empty")
        .strategy
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::random_tensor;
    use proptest::prelude::{prop_assert, proptest};

    fn probs(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows)
    }

    fn random_probs(n: usize, c: usize, seed: u64) -> Tensor {
        softmax_rows(&random_tensor(&[n, c], seed))
    }

    fn policy_with(weights: [f64; 2], alpha: f64) -> FusionPolicy {
        FusionPolicy {
            base_weights: vec![weights; 3],
            alpha: vec![alpha; 3],
            strategy: Strategy::Fixed,
            heads: None,
        }
    }

    #[test]
    fn fixed_identity_weights() {
        let (a, b) = (random_probs(5, 3, 1), random_probs(5, 3, 2));
        assert_eq!(
            fixed_fuse(&a, &b, &policy_with([1.0, 0.0], 0.7))
                .unwrap()
                .probs,
            a
        );
        assert_eq!(
            fixed_fuse(&a, &b, &policy_with([0.0, 1.0], 0.7))
                .unwrap()
                .probs,
            b
        );
    }

    #[test]
    fn fixed_class_two_mass() {
        let a = probs(&[vec![0.1, 0.1, 0.8]]);
        let b = probs(&[vec![0.2, 0.2, 0.6]]);
        let policy = FusionPolicy::defaults(3);
        let fused = fixed_fuse(&a, &b, &policy).unwrap();
        let unnorm: [f64; 3] = [
            0.95 * 0.1 + 0.05 * 0.2,
            0.95 * 0.1 + 0.05 * 0.2,
            0.2 * 0.8 + 0.8 * 0.6,
        ];
        assert!((unnorm[2] - 0.64).abs() < 1e-12);
        let z: f64 = unnorm.iter().sum();
        assert!((fused.probs.get(0, 2) - 0.64 / z).abs() < 1e-12);
    }

    #[test]
    fn equal_inputs_are_a_fixed_point() {
        let a = random_probs(6, 3, 3);
        for w in [[0.3, 0.7], [0.95, 0.05]] {
            let fused = fixed_fuse(&a, &a, &policy_with(w, 0.5)).unwrap();
            for (x, y) in fused.probs.values().iter().zip(a.values()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn adaptive_weights() {
        let a = probs(&[vec![0.6, 0.4], vec![0.6, 0.4]]);
        let b = probs(&[vec![0.4, 0.6], vec![0.5, 0.5]]);
        let fused = adaptive_fuse(&a, &b).unwrap();
        assert_eq!(fused.weights[0].row(0), &[0.5, 0.5]);
        // confidences 0.6 and 0.4 → weights (0.6, 0.4)
        let e = probs(&[vec![0.2, 0.4, 0.4]]);
        let f = probs(&[vec![0.6, 0.3, 0.1]]);
        let w = adaptive_fuse(&f, &e).unwrap().weights;
        assert!((w[0].get(0, 0) - 0.6).abs() < 1e-12 && (w[1].get(0, 0) - 0.4).abs() < 1e-12);
        // uniform vs confident: shares (1/3)/(1/3+0.9) and 0.9/(1/3+0.9)
        let u = probs(&[vec![1.0 / 3.0; 3]]);
        let k = probs(&[vec![0.9, 0.05, 0.05]]);
        let fused = adaptive_fuse(&u, &k).unwrap();
        let share = 0.9 / (1.0 / 3.0 + 0.9);
        assert!((fused.weights[1].get(0, 0) - share).abs() < 1e-12);
        let expect0 = (1.0 - share) / 3.0 + share * 0.9;
        assert!((fused.probs.get(0, 0) - expect0).abs() < 1e-12);
    }

    #[test]
    fn balanced_collapses() {
        let (a, b) = (random_probs(8, 3, 4), random_probs(8, 3, 5));
        let base = FusionPolicy::defaults(3);
        let mut one = base.clone();
        one.alpha = vec![1.0; 3];
        let fixed = fixed_fuse(&a, &b, &base).unwrap();
        let got = balanced_fuse(&a, &b, &one).unwrap();
        for (x, y) in got.probs.values().iter().zip(fixed.probs.values()) {
            assert!((x - y).abs() < 1e-12);
        }
        let mut zero = base;
        zero.alpha = vec![0.0; 3];
        let adaptive = adaptive_fuse(&a, &b).unwrap();
        let got = balanced_fuse(&a, &b, &zero).unwrap();
        for (x, y) in got.probs.values().iter().zip(adaptive.probs.values()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn non_stochastic_input_rejected() {
        let a = probs(&[vec![0.5, 0.6]]);
        let b = probs(&[vec![0.5, 0.5]]);
        assert!(matches!(adaptive_fuse(&a, &b), Err(FusionError::Input(_))));
    }

    #[test]
    fn wr_without_heads_is_a_config_error() {
        let e = ExpertOutputs {
            logits: Tensor::zeros(&[2, 3]),
            probs: Tensor::full(&[2, 3], 1.0 / 3.0),
            embedding: Tensor::zeros(&[2, 4]),
        };
        assert!(matches!(
            wr_fuse(&e, &e, &FusionPolicy::defaults(3)),
            Err(FusionError::Config(_))
        ));
    }

    #[test]
    fn untrained_heads_reproduce_balanced_fusion() {
        let mk = |seed, d| {
            let logits = random_tensor(&[6, 3], seed);
            ExpertOutputs {
                probs: softmax_rows(&logits),
                logits,
                embedding: random_tensor(&[6, d], seed + 9),
            }
        };
        let (g, a) = (mk(1, 5), mk(2, 4));
        let mut policy = FusionPolicy::defaults(3);
        policy.heads = Some(ProjectionHeads::new(5, 4, 4, 3, 0));
        let wr = wr_fuse(&g, &a, &policy).unwrap();
        let plain = balanced_fuse(&g.probs, &a.probs, &policy).unwrap();
        for (x, y) in wr.probs.values().iter().zip(plain.probs.values()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn selection_rules() {
        let report = |acc: f64, cv: f64| MetricsReport {
            count: 10,
            accuracy: acc,
            per_class_accuracy: vec![],
            precision: vec![],
            recall: vec![],
            f1: vec![],
            cv: Some(cv),
            confusion: vec![],
        };
        let s = |strategy, acc, cv| StrategyScore {
            strategy,
            val: report(acc, cv),
            test: report(acc, cv),
        };
        assert_eq!(
            pick_best(&[
                s(Strategy::Wr, 0.8, 0.1),
                s(Strategy::Fixed, 0.8, 0.1),
                s(Strategy::Adaptive, 0.8, 0.1)
            ]),
            Strategy::Fixed
        );
        assert_eq!(
            pick_best(&[
                s(Strategy::Fixed, 0.79, 0.0),
                s(Strategy::Adaptive, 0.80, 0.5)
            ]),
            Strategy::Adaptive
        );
        assert_eq!(
            pick_best(&[
                s(Strategy::Fixed, 0.8, 0.2),
                s(Strategy::Adaptive, 0.8, 0.1)
            ]),
            Strategy::Adaptive
        );
    }

    proptest! {
        #[test]
        fn fused_rows_are_distributions(seed in 0u64..500, alpha in 0.0f64..=1.0, w in 0.0f64..=1.0) {
            let (a, b) = (random_probs(7, 3, seed), random_probs(7, 3, seed + 1000));
            let mut policy = policy_with([w, 1.0 - w], alpha);
            policy.base_weights[2] = [1.0 - w, w];
            for fused in [
                fixed_fuse(&a, &b, &policy).unwrap(),
                adaptive_fuse(&a, &b).unwrap(),
                balanced_fuse(&a, &b, &policy).unwrap(),
            ] {
                for i in 0..7 {
                    let row = fused.probs.row(i);
                    prop_assert!(row.iter().all(|v| *v >= 0.0));
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn balanced_is_symmetric_in_experts(seed in 0u64..500, alpha in 0.0f64..=1.0) {
            let (a, b) = (random_probs(5, 3, seed), random_probs(5, 3, seed + 1000));
            let policy = FusionPolicy::defaults(3);
            let mut swapped = policy.clone();
            swapped.alpha = policy.alpha.iter().map(|_| alpha).collect();
            let mut original = swapped.clone();
            original.base_weights = policy.base_weights.clone();
            swapped.base_weights = policy.base_weights.iter().map(|w| [w[1], w[0]]).collect();
            let x = balanced_fuse(&a, &b, &original).unwrap();
            let y = balanced_fuse(&b, &a, &swapped).unwrap();
            for (p, q) in x.probs.values().iter().zip(y.probs.values()) {
                prop_assert!((p - q).abs() < 1e-12);
            }
        }
    }
}
