//! Exporting penultimate-layer embeddings and scoring their class structure.

use grafuse::graph::generate_sbm;
use grafuse::models::{ExpertModel, ModelConfig, ModelKind, Structure};
use grafuse::train::{export_embeddings, read_embeddings, silhouette_score, train, TrainConfig};

fn main() {
    let bundle = generate_sbm(&[80, 80, 80], 0.1, 0.01, 16, 1.0, 4).unwrap();
    let cfg = ModelConfig::defaults(ModelKind::ResidualGnn);
    let s = Structure::for_model(&bundle, &cfg).unwrap();
    let mut model = ExpertModel::for_bundle(&cfg, &bundle, 0).unwrap();
    let before = silhouette_score(&model.embed(&bundle, &s).unwrap(), bundle.labels());
    train(&mut model, &bundle, &s, &TrainConfig::default()).unwrap();
    let emb = model.embed(&bundle, &s).unwrap();
    println!(
        "silhouette of embeddings: {before:.3} untrained, {:.3} trained",
        silhouette_score(&emb, bundle.labels())
    );

    let dir = std::env::temp_dir().join("grafuse-embeddings-example");
    let meta = export_embeddings(&emb, bundle.labels(), &dir).unwrap();
    let (back, labels) = read_embeddings(&dir).unwrap();
    println!(
        "wrote {} x {} to {} (f32), first row {:.3?}, label {}",
        meta.num_nodes,
        meta.dim,
        dir.display(),
        &back.row(0)[..4],
        labels[0]
    );
}
