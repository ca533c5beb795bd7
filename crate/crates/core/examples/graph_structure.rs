//! Block-model graphs, the GCN propagation operator and exactly-k-hop
//! neighbor sets.

use grafuse::graph::{build_hopset, normalize_adjacency, SbmConfig, Split};

fn main() {
    let bundle = SbmConfig::planted(&[30, 30, 30], 0.2, 0.01, 8, 2.0, 11)
        .generate()
        .unwrap();
    println!(
        "{} nodes, {} undirected edges, {} features, {} classes",
        bundle.num_nodes(),
        bundle.num_undirected_edges(),
        bundle.feature_dim(),
        bundle.num_classes()
    );
    for split in [Split::Train, Split::Val, Split::Test] {
        println!("{split:?}: {} nodes", bundle.nodes_in(split).len());
    }

    let a = normalize_adjacency(bundle.edges(), bundle.num_nodes());
    println!(
        "normalized adjacency: {} stored entries, asymmetry {:.1e}, node 0 row {:?}",
        a.nnz(),
        a.asymmetry(),
        a.row_indices(0)
    );

    let hops = build_hopset(bundle.edges(), bundle.num_nodes(), 3, 16).unwrap();
    for k in 1..=hops.num_hops() {
        let m = hops.hop(k);
        // each row also holds its self-loop
        let mean = (m.nnz() - m.nrows()) as f64 / m.nrows() as f64;
        println!("hop {k}: {mean:.1} neighbors per node on average");
    }
}
