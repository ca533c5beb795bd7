//! The `grafuse` command line.
//!
//! Exit codes: 0 success, 1 configuration error, 2 data error (missing or
//! malformed inputs, dimension mismatches), 3 numeric failure.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointError, ModelMeta, PolicyMeta};
use crate::fusion::{self, ExpertOutputs, FusionError, FusionPlan, Strategy};
use crate::graph::{
    read_bundle, write_bundle, GraphBundle, GraphError, SbmConfig, Split, SplitSpec,
};
use crate::models::{ExpertModel, ModelConfig, ModelError, ModelKind, Structure};
use crate::tensor::TensorError;
use crate::train::{self, evaluate, MetricsReport, TrainConfig, TrainError};
use crate::transport::TransportError;

pub const EFFECTIVE_CONFIG: &str = "effective_config.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const SCORES_FILE: &str = "strategies.json";
pub const TABLE_FILE: &str = "table.txt";
pub const THREADS_ENV: &str = "GRAFUSE_THREADS";

/// A failed command: message for stderr and the process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn config(msg: impl Into<String>) -> Self {
        CliError {
            code: 1,
            message: msg.into(),
        }
    }

    fn data(msg: impl Into<String>) -> Self {
        CliError {
            code: 2,
            message: msg.into(),
        }
    }

    fn numeric(msg: impl Into<String>) -> Self {
        CliError {
            code: 3,
            message: msg.into(),
        }
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::Domain { .. } | TensorError::DegenerateRow { .. } => {
                CliError::numeric(e.to_string())
            }
            TensorError::Config(_) => CliError::config(e.to_string()),
            _ => CliError::data(e.to_string()),
        }
    }
}

impl From<GraphError> for CliError {
    fn from(e: GraphError) -> Self {
        match e {
            GraphError::Config(_) => CliError::config(e.to_string()),
            _ => CliError::data(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Tensor(t) => t.into(),
            ModelError::Graph(g) => g.into(),
            ModelError::Config(_) => CliError::config(e.to_string()),
            ModelError::Mismatch { .. } => CliError::data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Model(m) => m.into(),
            TrainError::Tensor(t) => t.into(),
            TrainError::Config(_) => CliError::config(e.to_string()),
            TrainError::Diverged { .. } => CliError::numeric(e.to_string()),
            TrainError::Contract(_) | TrainError::Io { .. } => CliError::data(e.to_string()),
        }
    }
}

impl From<TransportError> for CliError {
    fn from(e: TransportError) -> Self {
        match e {
            TransportError::Tensor(t) => t.into(),
            TransportError::NonFiniteCost => CliError::numeric(e.to_string()),
            TransportError::Config(_) | TransportError::TooLarge(_) => {
                CliError::config(e.to_string())
            }
            _ => CliError::data(e.to_string()),
        }
    }
}

impl From<FusionError> for CliError {
    fn from(e: FusionError) -> Self {
        match e {
            FusionError::Tensor(t) => t.into(),
            FusionError::Model(m) => m.into(),
            FusionError::Transport(t) => t.into(),
            FusionError::Train(t) => t.into(),
            FusionError::Config(_) => CliError::config(e.to_string()),
            FusionError::Input(_) => CliError::data(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Model(m) => m.into(),
            _ => CliError::data(e.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "grafuse",
    version,
    about = "Train graph experts, fuse them, evaluate and export"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one expert and write its checkpoint, history and metrics.
    Train(TrainArgs),
    /// Fuse two trained experts and select a strategy on validation.
    Fuse(FuseArgs),
    /// Evaluate a model or fusion-policy checkpoint on every split.
    Eval(EvalArgs),
    /// Write a model's embeddings and labels as flat binary files.
    ExportEmbeddings(ExportArgs),
    /// Generate a stochastic block model bundle.
    GenSbm(GenSbmArgs),
    /// Check a graph bundle and print its summary.
    ValidateBundle(ValidateArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Bundle directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed for initialization, dropout and sampling.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// L2 weight decay.
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Maximum number of epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Early-stopping patience in epochs.
    #[arg(long)]
    pub patience: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    /// Expert architecture: gcn, gnn or mhgat.
    #[arg(long)]
    pub model: Option<ModelKind>,
    /// Hidden width (per head for mhgat).
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Dropout probability.
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Attention heads (mhgat).
    #[arg(long)]
    pub heads: Option<usize>,
    /// Hop levels (mhgat).
    #[arg(long)]
    pub hops: Option<usize>,
    /// Neighbor cap per node for hops >= 2 (mhgat).
    #[arg(long)]
    pub max_neighbors: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    /// Checkpoint of the first expert (weighted by the first base weight).
    #[arg(long)]
    pub gnn: Option<PathBuf>,
    /// Checkpoint of the second expert.
    #[arg(long)]
    pub gat: Option<PathBuf>,
    /// Add the transport-guided strategy and train its projection heads.
    #[arg(long)]
    pub wr: bool,
    /// Comma-separated candidates among fixed, adaptive, wr.
    #[arg(long, value_delimiter = ',')]
    pub strategies: Option<Vec<Strategy>>,
    /// Comma-separated per-class transport weights.
    #[arg(long, value_delimiter = ',')]
    pub lambda: Option<Vec<f64>>,
    /// Comma-separated per-class balance factors.
    #[arg(long, value_delimiter = ',')]
    pub alpha: Option<Vec<f64>>,
    /// Keep the given balance factors instead of tuning them on validation.
    #[arg(long)]
    pub no_tune_balance: bool,
    /// Use untrained (identity) heads for the wr strategy.
    #[arg(long)]
    pub no_projection: bool,
    /// Width of the projection space.
    #[arg(long)]
    pub proj_dim: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Bundle directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Model or fusion-policy checkpoint directory.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// First expert checkpoint, required for a fusion policy.
    #[arg(long)]
    pub gnn: Option<PathBuf>,
    /// Second expert checkpoint, required for a fusion policy.
    #[arg(long)]
    pub gat: Option<PathBuf>,
    /// Also write metrics.json and effective_config.json here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// Bundle directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Model checkpoint directory.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenSbmArgs {
    /// Output bundle directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Named preset; `pubmed-like` ignores the shape flags.
    #[arg(long)]
    pub preset: Option<String>,
    /// Comma-separated block sizes.
    #[arg(long, value_delimiter = ',', default_value = "100,100,100")]
    pub blocks: Vec<usize>,
    /// Within-block edge probability.
    #[arg(long, default_value_t = 0.9)]
    pub p_in: f64,
    /// Between-block edge probability.
    #[arg(long, default_value_t = 0.05)]
    pub p_out: f64,
    /// Feature width.
    #[arg(long, default_value_t = 16)]
    pub feature_dim: usize,
    /// Class-mean strength.
    #[arg(long, default_value_t = 3.0)]
    pub signal: f64,
    /// `stratified:TRAIN,VAL` or `planetoid:PER_CLASS,VAL,TEST`.
    #[arg(long, default_value = "stratified:0.6,0.2")]
    pub split: String,
    /// Generator seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    /// Bundle directory.
    pub bundle: PathBuf,
}

/// Every resolved setting of a `train` or `fuse` run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub model: Option<ModelConfig>,
    pub train: TrainConfig,
    pub gnn: Option<PathBuf>,
    pub gat: Option<PathBuf>,
    pub fusion: FusionPlan,
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))
    }

    fn apply_common(&mut self, a: &ConfigArgs) {
        if let Some(d) = &a.data {
            self.data = Some(d.clone());
        }
        if let Some(o) = &a.out {
            self.out = Some(o.clone());
        }
    }

    fn require_paths(&self) -> CliResult<(PathBuf, PathBuf)> {
        let data = self
            .data
            .clone()
            .ok_or_else(|| CliError::config("no bundle given (--data or \"data\")"))?;
        let out = self
            .out
            .clone()
            .ok_or_else(|| CliError::config("no output directory given (--out or \"out\")"))?;
        if !data.is_dir() {
            return Err(CliError::data(format!(
                "bundle directory {} does not exist",
                data.display()
            )));
        }
        Ok((data, out))
    }
}

fn apply_train_overrides(t: &mut TrainConfig, a: &ConfigArgs) {
    if let Some(s) = a.seed {
        t.seed = s;
    }
    if let Some(v) = a.lr {
        t.lr = v;
    }
    if let Some(v) = a.weight_decay {
        t.weight_decay = v;
    }
    if let Some(v) = a.epochs {
        t.max_epochs = v;
    }
    if let Some(v) = a.patience {
        t.patience = v;
    }
}

/// Train and validation/test metrics written next to a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub train: MetricsReport,
    pub val: MetricsReport,
    pub test: MetricsReport,
}

impl SplitMetrics {
    pub fn compute(scores: &crate::tensor::Tensor, bundle: &GraphBundle) -> CliResult<Self> {
        Ok(SplitMetrics {
            train: evaluate(scores, bundle, Split::Train)?,
            val: evaluate(scores, bundle, Split::Val)?,
            test: evaluate(scores, bundle, Split::Test)?,
        })
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
    fs::write(path, text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::data(format!("{}: {e}", dir.display())))
}

fn load_expert(dir: &Path, bundle: &GraphBundle) -> CliResult<(ExpertModel, ModelMeta, Structure)> {
    let (model, meta) = checkpoint::load_model(dir)?;
    model.check_bundle(bundle)?;
    let structure = Structure::for_model(bundle, model.config())?;
    Ok((model, meta, structure))
}

fn cmd_train(args: &TrainArgs) -> CliResult<()> {
    let mut cfg = match &args.common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_common(&args.common);
    apply_train_overrides(&mut cfg.train, &args.common);
    let mut model_cfg = match (cfg.model.take(), args.model) {
        (Some(m), Some(k)) if m.kind != k => {
            return Err(CliError::config(format!(
                "--model {k} contradicts the configured model {}",
                m.kind
            )))
        }
        (Some(m), _) => m,
        (None, Some(k)) => ModelConfig::defaults(k),
        (None, None) => return Err(CliError::config("no model given (--model or \"model\")")),
    };
    if let Some(v) = args.hidden {
        model_cfg.hidden = v;
    }
    if let Some(v) = args.dropout {
        model_cfg.dropout = v;
    }
    if let Some(v) = args.heads {
        model_cfg.heads = v;
    }
    if let Some(v) = args.hops {
        model_cfg.hops = v;
    }
    if let Some(v) = args.max_neighbors {
        model_cfg.max_neighbors = v;
    }
    model_cfg.validate()?;
    cfg.train.validate()?;
    cfg.model = Some(model_cfg.clone());
    let (data, out) = cfg.require_paths()?;

    let bundle = read_bundle(&data)?;
    create_dir(&out)?;
    write_json(&out.join(EFFECTIVE_CONFIG), &cfg)?;
    let structure = Structure::for_model(&bundle, &model_cfg)?;
    let mut model = ExpertModel::for_bundle(&model_cfg, &bundle, cfg.train.seed)?;
    let history = match train::train(&mut model, &bundle, &structure, &cfg.train) {
        Ok(h) => h,
        Err(TrainError::Diverged {
            epoch,
            best_epoch,
            history,
        }) => {
            history.write_jsonl(out.join(HISTORY_FILE))?;
            return Err(CliError::numeric(format!(
                "non-finite loss at epoch {epoch}; best epoch was {best_epoch}, history in {}",
                out.join(HISTORY_FILE).display()
            )));
        }
        Err(e) => return Err(e.into()),
    };
    checkpoint::save_model(&model, history.best_epoch, &out)?;
    history.write_jsonl(out.join(HISTORY_FILE))?;
    let metrics = SplitMetrics::compute(&model.logits(&bundle, &structure)?, &bundle)?;
    write_json(&out.join(METRICS_FILE), &metrics)?;
    println!(
        "{} best epoch {} (val {:.4}), test:\n{}",
        model_cfg.kind,
        history.best_epoch,
        history.best_val_acc,
        metrics.test.table()
    );
    Ok(())
}

/// One row per expert and per strategy: validation and test accuracy,
/// per-class test accuracy and CV.
pub fn fusion_table(rows: &[(String, &MetricsReport, &MetricsReport)]) -> String {
    let classes = rows.first().map_or(0, |r| r.2.per_class_accuracy.len());
    let mut s = format!("{:<14} {:>7} {:>7}", "method", "val", "test");
    for c in 0..classes {
        s.push_str(&format!(" {:>7}", format!("class{c}")));
    }
    s.push_str(&format!(" {:>7}\n", "cv"));
    for (name, val, test) in rows {
        s.push_str(&format!(
            "{name:<14} {:>7.4} {:>7.4}",
            val.accuracy, test.accuracy
        ));
        for a in &test.per_class_accuracy {
            s.push_str(&format!(" {a:>7.4}"));
        }
        let cv = test.cv.map_or("n/a".to_string(), |v| format!("{v:.4}"));
        s.push_str(&format!(" {cv:>7}\n"));
    }
    s
}

fn cmd_fuse(args: &FuseArgs) -> CliResult<()> {
    let mut cfg = match &args.common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_common(&args.common);
    let plan = &mut cfg.fusion;
    apply_train_overrides(&mut plan.heads.train, &args.common);
    if let Some(p) = &args.gnn {
        cfg.gnn = Some(p.clone());
    }
    if let Some(p) = &args.gat {
        cfg.gat = Some(p.clone());
    }
    if let Some(s) = &args.strategies {
        plan.strategies = s.clone();
    }
    if args.wr && !plan.strategies.contains(&Strategy::Wr) {
        plan.strategies.push(Strategy::Wr);
    }
    plan.strategies.sort();
    plan.strategies.dedup();
    if plan.strategies.is_empty() {
        return Err(CliError::config("no candidate strategies"));
    }
    if let Some(l) = &args.lambda {
        plan.heads.lambda = l.clone();
    }
    if let Some(a) = &args.alpha {
        plan.alpha = Some(a.clone());
    }
    if args.no_tune_balance {
        plan.tune_balance = false;
    }
    if args.no_projection {
        plan.projection = false;
    }
    if let Some(d) = args.proj_dim {
        plan.heads.proj_dim = Some(d);
    }
    let (data, out) = cfg.require_paths()?;
    let (gnn_dir, gat_dir) = match (&cfg.gnn, &cfg.gat) {
        (Some(a), Some(b)) => (a.clone(), b.clone()),
        _ => return Err(CliError::config("fusion needs --gnn and --gat checkpoints")),
    };

    let bundle = read_bundle(&data)?;
    let c = bundle.num_classes();
    cfg.fusion.base_policy(c)?;
    cfg.fusion.heads.validate(c)?;
    let (gnn_model, _, gnn_s) = load_expert(&gnn_dir, &bundle)?;
    let (gat_model, _, gat_s) = load_expert(&gat_dir, &bundle)?;
    create_dir(&out)?;
    write_json(&out.join(EFFECTIVE_CONFIG), &cfg)?;

    let gnn = ExpertOutputs::from_model(&gnn_model, &bundle, &gnn_s)?;
    let gat = ExpertOutputs::from_model(&gat_model, &bundle, &gat_s)?;
    let run = fusion::run_fusion(&gnn, &gat, &bundle, &cfg.fusion)?;
    let epoch = run.history.as_ref().map_or(0, |h| h.best_epoch);
    checkpoint::save_policy(&run.policy, epoch, cfg.fusion.heads.train.seed, &out)?;
    if let Some(h) = &run.history {
        h.write_jsonl(out.join(HISTORY_FILE))?;
    }
    write_json(&out.join(SCORES_FILE), &run.scores)?;

    let expert_rows = [
        (format!("{} expert", gnn_model.kind()), &gnn.probs),
        (format!("{} expert", gat_model.kind()), &gat.probs),
    ];
    let mut reports = Vec::new();
    for (name, p) in expert_rows {
        reports.push((
            name,
            evaluate(p, &bundle, Split::Val)?,
            evaluate(p, &bundle, Split::Test)?,
        ));
    }
    let mut rows: Vec<(String, &MetricsReport, &MetricsReport)> =
        reports.iter().map(|(n, v, t)| (n.clone(), v, t)).collect();
    for s in &run.scores {
        rows.push((s.strategy.to_string(), &s.val, &s.test));
    }
    let table = format!("{}selected: {}\n", fusion_table(&rows), run.policy.strategy);
    fs::write(out.join(TABLE_FILE), &table)
        .map_err(|e| CliError::data(format!("{}: {e}", out.join(TABLE_FILE).display())))?;
    print!("{table}");
    Ok(())
}

#[derive(Serialize)]
struct EvalConfig<'a> {
    data: &'a Path,
    checkpoint: &'a Path,
    gnn: Option<&'a Path>,
    gat: Option<&'a Path>,
}

#[derive(Deserialize)]
struct KindProbe {
    kind: String,
}

fn cmd_eval(args: &EvalArgs) -> CliResult<()> {
    let bundle = read_bundle(&args.data)?;
    let meta_path = args.checkpoint.join(checkpoint::META_FILE);
    let text = fs::read_to_string(&meta_path)
        .map_err(|e| CliError::data(format!("{}: {e}", meta_path.display())))?;
    let probe: KindProbe = serde_json::from_str(&text)
        .map_err(|e| CliError::data(format!("{}: {e}", meta_path.display())))?;
    let scores = if probe.kind == "fusion" {
        let (policy, _): (_, PolicyMeta) = checkpoint::load_policy(&args.checkpoint)?;
        let (Some(g), Some(a)) = (&args.gnn, &args.gat) else {
            return Err(CliError::config(
                "a fusion policy needs --gnn and --gat expert checkpoints",
            ));
        };
        let (gm, _, gs) = load_expert(g, &bundle)?;
        let (am, _, as_) = load_expert(a, &bundle)?;
        let gnn = ExpertOutputs::from_model(&gm, &bundle, &gs)?;
        let gat = ExpertOutputs::from_model(&am, &bundle, &as_)?;
        fusion::fuse(&gnn, &gat, &policy)?.probs
    } else {
        let (model, _, structure) = load_expert(&args.checkpoint, &bundle)?;
        model.logits(&bundle, &structure)?
    };
    let metrics = SplitMetrics::compute(&scores, &bundle)?;
    if let Some(out) = &args.out {
        create_dir(out)?;
        write_json(
            &out.join(EFFECTIVE_CONFIG),
            &EvalConfig {
                data: &args.data,
                checkpoint: &args.checkpoint,
                gnn: args.gnn.as_deref(),
                gat: args.gat.as_deref(),
            },
        )?;
        write_json(&out.join(METRICS_FILE), &metrics)?;
    }
    println!(
        "{}",
        serde_json::to_string_pretty(&metrics).expect("serializable")
    );
    println!("test:\n{}", metrics.test.table());
    Ok(())
}

fn cmd_export(args: &ExportArgs) -> CliResult<()> {
    let bundle = read_bundle(&args.data)?;
    let (model, _, structure) = load_expert(&args.checkpoint, &bundle)?;
    let emb = model.embed(&bundle, &structure)?;
    create_dir(&args.out)?;
    write_json(
        &args.out.join(EFFECTIVE_CONFIG),
        &EvalConfig {
            data: &args.data,
            checkpoint: &args.checkpoint,
            gnn: None,
            gat: None,
        },
    )?;
    let meta = train::export_embeddings(&emb, bundle.labels(), &args.out)?;
    println!(
        "wrote {} x {} embeddings to {}",
        meta.num_nodes,
        meta.dim,
        args.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct GenSbmConfig<'a> {
    preset: Option<&'a str>,
    blocks: &'a [usize],
    p_in: f64,
    p_out: f64,
    feature_dim: usize,
    signal: f64,
    split: &'a str,
    seed: u64,
}

fn cmd_gen_sbm(args: &GenSbmArgs) -> CliResult<()> {
    let sbm = match args.preset.as_deref() {
        Some("pubmed-like") => SbmConfig::pubmed_like(args.seed),
        Some(other) => {
            return Err(CliError::config(format!(
                "unknown preset {other:?} (expected pubmed-like)"
            )))
        }
        None => {
            let split: SplitSpec = args.split.parse()?;
            SbmConfig {
                split,
                ..SbmConfig::planted(
                    &args.blocks,
                    args.p_in,
                    args.p_out,
                    args.feature_dim,
                    args.signal,
                    args.seed,
                )
            }
        }
    };
    let bundle = sbm.generate()?;
    write_bundle(&bundle, &args.out)?;
    write_json(
        &args.out.join(EFFECTIVE_CONFIG),
        &GenSbmConfig {
            preset: args.preset.as_deref(),
            blocks: &args.blocks,
            p_in: args.p_in,
            p_out: args.p_out,
            feature_dim: args.feature_dim,
            signal: args.signal,
            split: &args.split,
            seed: args.seed,
        },
    )?;
    println!(
        "wrote {} nodes, {} edges, {} classes to {}",
        bundle.num_nodes(),
        bundle.num_undirected_edges(),
        bundle.num_classes(),
        args.out.display()
    );
    Ok(())
}

fn cmd_validate(args: &ValidateArgs) -> CliResult<()> {
    let bundle = read_bundle(&args.bundle)?;
    let count = |s| bundle.nodes_in(s).len();
    println!(
        "ok: {} nodes, {} undirected edges, {} features, {} classes; train {} val {} test {}",
        bundle.num_nodes(),
        bundle.num_undirected_edges(),
        bundle.feature_dim(),
        bundle.num_classes(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test)
    );
    Ok(())
}

fn configure_threads() -> CliResult<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v.trim().parse().ok().filter(|n| *n > 0).ok_or_else(|| {
        CliError::config(format!("{THREADS_ENV}={v:?} is not a positive integer"))
    })?;
    // a second call in the same process keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global();
    Ok(())
}

/// Runs one command and returns its exit code.
pub fn execute(cli: &Cli) -> i32 {
    let result = configure_threads().and_then(|()| match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Fuse(a) => cmd_fuse(a),
        Command::Eval(a) => cmd_eval(a),
        Command::ExportEmbeddings(a) => cmd_export(a),
        Command::GenSbm(a) => cmd_gen_sbm(a),
        Command::ValidateBundle(a) => cmd_validate(a),
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .try_init();
    match Cli::try_parse_from(args) {
        Ok(cli) => execute(&cli),
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                1
            } else {
                0
            }
        }
    }
}
