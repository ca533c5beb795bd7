//! Training the GCN baseline with early stopping, then saving and reloading
//! the checkpoint.

use grafuse::checkpoint::{load_model, save_model};
use grafuse::graph::{SbmConfig, Split};
use grafuse::models::{ExpertModel, ModelConfig, ModelKind, Structure};
use grafuse::train::{evaluate_model, train, TrainConfig};

fn main() {
    let bundle = SbmConfig::pubmed_like(1).generate().unwrap();
    let cfg = ModelConfig::defaults(ModelKind::Gcn);
    let structure = Structure::for_model(&bundle, &cfg).unwrap();
    let mut model = ExpertModel::for_bundle(&cfg, &bundle, 42).unwrap();
    let history = train(&mut model, &bundle, &structure, &TrainConfig::default()).unwrap();
    println!(
        "ran {} epochs, kept epoch {} (val {:.4}, before training {:.4})",
        history.records.len() - 1,
        history.best_epoch,
        history.best_val_acc,
        history.initial_val_acc
    );
    let report = evaluate_model(&model, &bundle, &structure, Split::Test).unwrap();
    print!("{}", report.table());

    let dir = std::env::temp_dir().join("grafuse-gcn-example");
    save_model(&model, history.best_epoch, &dir).unwrap();
    let (reloaded, meta) = load_model(&dir).unwrap();
    assert_eq!(reloaded, model);
    println!(
        "checkpoint in {} ({} parameter tensors)",
        dir.display(),
        meta.params.len()
    );
}
