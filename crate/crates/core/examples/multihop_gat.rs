//! The multi-hop attention network: training, learned hop weights and the
//! attention of one node.

use grafuse::graph::{SbmConfig, Split};
use grafuse::models::{
    gat_attention, AttentionHead, ExpertModel, ModelConfig, ModelKind, Structure,
};
use grafuse::tensor::Tape;
use grafuse::train::{evaluate_model, train, TrainConfig};

fn main() {
    let bundle = SbmConfig::pubmed_like(1).generate().unwrap();
    let cfg = ModelConfig::defaults(ModelKind::MultiHopGat);
    let structure = Structure::for_model(&bundle, &cfg).unwrap();
    let mut model = ExpertModel::for_bundle(&cfg, &bundle, 42).unwrap();
    let history = train(&mut model, &bundle, &structure, &TrainConfig::default()).unwrap();
    println!("best epoch {}", history.best_epoch);
    print!(
        "{}",
        evaluate_model(&model, &bundle, &structure, Split::Test)
            .unwrap()
            .table()
    );

    let ExpertModel::MultiHopGat(gat) = &model else {
        unreachable!()
    };
    println!("hop mixing weights {:.3?}", gat.hop_weights());

    // first head of hop 1, recomputed outside the model
    let mut tape = Tape::new();
    let p = model.params().bind(&mut tape);
    let x = tape.constant_arc(bundle.features().clone());
    let head = AttentionHead {
        weight: p[0],
        attn_src: p[1],
        attn_dst: p[2],
    };
    let hop = structure.hops.as_ref().unwrap().hop(1);
    let out = gat_attention(&mut tape, x, hop, &head).unwrap();
    let node = 2000;
    let alpha = &tape.value(out.alpha).values()[hop.row_range(node)];
    for (j, a) in hop.row_indices(node).iter().zip(alpha) {
        println!(
            "node {node} (class {}) attends to {j} (class {}) with {a:.3}",
            bundle.labels()[node],
            bundle.labels()[*j]
        );
    }
}
