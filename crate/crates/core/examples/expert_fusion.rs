//! Two experts, three fusion strategies, selection on validation.

use grafuse::cli::fusion_table;
use grafuse::fusion::{run_fusion, ExpertOutputs, FusionPlan};
use grafuse::graph::{SbmConfig, Split};
use grafuse::models::{ExpertModel, ModelConfig, ModelKind, Structure};
use grafuse::train::{evaluate, train, TrainConfig};

fn expert(kind: ModelKind, bundle: &grafuse::graph::GraphBundle) -> ExpertOutputs {
    let cfg = ModelConfig::defaults(kind);
    let s = Structure::for_model(bundle, &cfg).unwrap();
    let mut m = ExpertModel::for_bundle(&cfg, bundle, 1).unwrap();
    let tc = TrainConfig {
        seed: 1,
        ..TrainConfig::default()
    };
    train(&mut m, bundle, &s, &tc).unwrap();
    ExpertOutputs::from_model(&m, bundle, &s).unwrap()
}

fn main() {
    let bundle = SbmConfig::pubmed_like(1).generate().unwrap();
    let gnn = expert(ModelKind::ResidualGnn, &bundle);
    let gat = expert(ModelKind::MultiHopGat, &bundle);

    let run = run_fusion(&gnn, &gat, &bundle, &FusionPlan::full()).unwrap();
    let reports: Vec<_> = [("gnn expert", &gnn), ("mhgat expert", &gat)]
        .into_iter()
        .map(|(name, e)| {
            (
                name.to_string(),
                evaluate(&e.probs, &bundle, Split::Val).unwrap(),
                evaluate(&e.probs, &bundle, Split::Test).unwrap(),
            )
        })
        .collect();
    let mut rows: Vec<_> = reports.iter().map(|(n, v, t)| (n.clone(), v, t)).collect();
    for s in &run.scores {
        rows.push((s.strategy.to_string(), &s.val, &s.test));
    }
    print!("{}", fusion_table(&rows));
    println!("tuned balance factors {:?}", run.policy.alpha);
    println!("selected {}", run.policy.strategy);
    if let Some(h) = &run.history {
        println!("projection heads kept epoch {}", h.best_epoch);
    }
}
