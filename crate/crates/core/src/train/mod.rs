//! Optimization loop, early stopping and evaluation.

mod export;
mod metrics;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{GraphBundle, Split};
use crate::models::{ExpertModel, Mode, ModelError, ParamSet, Structure};
use crate::tensor::{Tape, Tensor, TensorError, Var};

pub use export::{export_embeddings, read_embeddings, EmbeddingMeta};
pub use metrics::{
    accuracy, coefficient_of_variation, evaluate, evaluate_predictions, silhouette_score,
    MetricsReport,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("configuration: {0}")]
    Config(String),
    #[error("contract: {0}")]
    Contract(String),
    #[error("non-finite loss at epoch {epoch}; parameters restored to epoch {best_epoch}")]
    Diverged {
        epoch: usize,
        best_epoch: usize,
        history: History,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Optimizer and schedule settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Per-class weights of the cross-entropy; `None` weighs classes equally.
    pub class_weights: Option<Vec<f64>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            weight_decay: 5e-4,
            max_epochs: 500,
            patience: 50,
            seed: 42,
            class_weights: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Config(format!(
                "learning rate {} must be finite and >= 0",
                self.lr
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(TrainError::Config("weight decay must be >= 0".into()));
        }
        if self.patience > self.max_epochs {
            return Err(TrainError::Config(format!(
                "patience {} exceeds max epochs {}",
                self.patience, self.max_epochs
            )));
        }
        if let Some(w) = &self.class_weights {
            if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(TrainError::Config(
                    "class weights must be finite and >= 0".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Adam with L2 weight decay folded into the gradient.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .tensors()
            .iter()
            .map(|t| vec![0.0; t.len()])
            .collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update. `grads[i]` is `None` for parameters the loss does not reach.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<Tensor>]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (i, tensor) in params.tensors_mut().iter_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, w) in tensor.values_mut().iter_mut().enumerate() {
                let gk = g.values()[k] + self.weight_decay * *w;
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                *w -= self.lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
}

/// Per-epoch log plus the early-stopping outcome. Epoch 0 is the state
/// before any update.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct History {
    pub records: Vec<EpochRecord>,
    pub initial_val_acc: f64,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub stopped_early: bool,
}

impl History {
    /// One JSON object per epoch per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("plain record"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io = |source| TrainError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut f = std::fs::File::create(path).map_err(io)?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(io)
    }
}

/// Generic training loop: Adam on `loss_fn`, keeping the parameters with the
/// best `val_fn` score (strict improvement) and stopping after `patience`
/// epochs without one. The initial parameters count as a candidate.
pub fn fit<L, V>(
    params: &mut ParamSet,
    cfg: &TrainConfig,
    mut loss_fn: L,
    mut val_fn: V,
) -> Result<History>
where
    L: FnMut(&mut Tape, &[Var], u64) -> Result<Var>,
    V: FnMut(&ParamSet) -> Result<f64>,
{
    cfg.validate()?;
    let mut adam = Adam::new(params, cfg.lr, cfg.weight_decay);
    let mut history = History::default();
    let initial = val_fn(params)?;
    history.initial_val_acc = initial;
    history.best_val_acc = initial;
    let mut best = params.clone();
    let mut since_best = 0;
    for epoch in 1..=cfg.max_epochs {
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let loss = loss_fn(&mut tape, &vars, epoch as u64)?;
        let loss_value = tape.value(loss).values()[0];
        if !loss_value.is_finite() {
            params.load(&best)?;
            log::error!(
                "loss became {loss_value} at epoch {epoch}; restored epoch {} (val acc {:.4})",
                history.best_epoch,
                history.best_val_acc
            );
            return Err(TrainError::Diverged {
                epoch,
                best_epoch: history.best_epoch,
                history,
            });
        }
        tape.backward(loss)?;
        let grads: Vec<Option<Tensor>> = vars.iter().map(|&v| tape.grad(v)).collect();
        adam.step(params, &grads);
        let val_acc = val_fn(params)?;
        history.records.push(EpochRecord {
            epoch,
            train_loss: loss_value,
            val_acc,
        });
        if val_acc > history.best_val_acc {
            history.best_val_acc = val_acc;
            history.best_epoch = epoch;
            best = params.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                history.stopped_early = true;
                break;
            }
        }
    }
    params.load(&best)?;
    Ok(history)
}

/// Trains an expert on masked cross-entropy over the training nodes, with
/// early stopping on validation accuracy.
pub fn train(
    model: &mut ExpertModel,
    bundle: &GraphBundle,
    structure: &Structure,
    cfg: &TrainConfig,
) -> Result<History> {
    model.check_bundle(bundle)?;
    let train_rows = bundle.train_nodes();
    let val_rows = bundle.val_nodes();
    if train_rows.is_empty() || val_rows.is_empty() {
        return Err(TrainError::Contract(
            "training and validation masks must be non-empty".into(),
        ));
    }
    if let Some(w) = &cfg.class_weights {
        if w.len() != bundle.num_classes() {
            return Err(TrainError::Config(format!(
                "{} class weights for {} classes",
                w.len(),
                bundle.num_classes()
            )));
        }
    }
    let labels = bundle.labels().to_vec();
    let template = model.clone();
    let features = std::sync::Arc::clone(bundle.features());
    let mut params = model.params().clone();
    let history = fit(
        &mut params,
        cfg,
        |tape, vars, epoch| {
            let x = tape.constant_arc(std::sync::Arc::clone(&features));
            let (logits, _) =
                template.forward_with(tape, vars, x, structure, Mode::Train { epoch })?;
            let logp = tape.log_softmax(logits);
            Ok(tape.masked_nll(logp, &train_rows, &labels, cfg.class_weights.as_deref())?)
        },
        |p| {
            let mut candidate = template.clone();
            candidate.params_mut().load(p)?;
            let logits = candidate.logits(bundle, structure)?;
            Ok(accuracy(&logits, &labels, &val_rows))
        },
    )?;
    model.params_mut().load(&params)?;
    Ok(history)
}

/// Eval-mode metrics of an expert on one split.
pub fn evaluate_model(
    model: &ExpertModel,
    bundle: &GraphBundle,
    structure: &Structure,
    split: Split,
) -> Result<MetricsReport> {
    let logits = model.logits(bundle, structure)?;
    evaluate(&logits, bundle, split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::generate_sbm;
    use crate::models::{ModelConfig, ModelKind};

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let bundle = generate_sbm(&[10, 10], 0.5, 0.05, 4, 2.0, 1).unwrap();
        let cfg = ModelConfig::defaults(ModelKind::Gcn);
        let structure = Structure::for_model(&bundle, &cfg).unwrap();
        let mut model = ExpertModel::for_bundle(&cfg, &bundle, 3).unwrap();
        let before = model.clone();
        let tc = TrainConfig {
            lr: 0.0,
            weight_decay: 0.0,
            max_epochs: 5,
            patience: 5,
            ..TrainConfig::default()
        };
        let h = train(&mut model, &bundle, &structure, &tc).unwrap();
        assert_eq!(model, before);
        assert!(h.records.iter().all(|r| r.val_acc == h.initial_val_acc));
        assert_eq!(h.best_epoch, 0);
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            patience: 10,
            max_epochs: 5,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(TrainError::Config(_))));
        let bad = TrainConfig {
            lr: -1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn divergence_restores_last_good_parameters() {
        let mut params = ParamSet::new();
        params.push("w", Tensor::scalar(1.0));
        let start = params.clone();
        let cfg = TrainConfig {
            max_epochs: 10,
            patience: 10,
            ..TrainConfig::default()
        };
        let err = fit(
            &mut params,
            &cfg,
            |tape, vars, epoch| {
                if epoch == 3 {
                    let nan = tape.constant(Tensor::scalar(f64::NAN));
                    return Ok(tape.mul(vars[0], nan)?);
                }
                Ok(tape.mul(vars[0], vars[0])?)
            },
            |_| Ok(0.5),
        )
        .unwrap_err();
        match err {
            TrainError::Diverged {
                epoch: 3,
                best_epoch: 0,
                history,
            } => assert_eq!(history.records.len(), 2),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(params, start);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut params = ParamSet::new();
        params.push("w", Tensor::from_vec(vec![2], vec![3.0, -2.0]).unwrap());
        let cfg = TrainConfig {
            lr: 0.1,
            weight_decay: 0.0,
            max_epochs: 300,
            patience: 300,
            ..TrainConfig::default()
        };
        let mut step = 0.0;
        fit(
            &mut params,
            &cfg,
            |tape, vars, _| {
                let sq = tape.mul(vars[0], vars[0])?;
                Ok(tape.sum(sq))
            },
            |p| {
                // monotone score so the final parameters are kept
                step += 1.0;
                let _ = p;
                Ok(step)
            },
        )
        .unwrap();
        assert!(params.tensors()[0].values().iter().all(|v| v.abs() < 0.05));
    }
}
