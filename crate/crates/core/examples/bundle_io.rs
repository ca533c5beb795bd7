//! Writing a graph bundle to disk, reading it back and validating it.

use grafuse::graph::{read_bundle, write_bundle, SbmConfig, SplitSpec};

fn main() {
    let dir = std::env::args()
        .nth(1)
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("grafuse-bundle-example"));
    let bundle = SbmConfig::pubmed_like(3).generate().unwrap();
    write_bundle(&bundle, &dir).unwrap();
    for entry in std::fs::read_dir(&dir).unwrap() {
        let entry = entry.unwrap();
        println!(
            "{:<16} {:>9} bytes",
            entry.file_name().to_string_lossy(),
            entry.metadata().unwrap().len()
        );
    }

    let back = read_bundle(&dir).unwrap();
    assert_eq!(back.labels(), bundle.labels());
    assert_eq!(back.features(), bundle.features());
    println!("round trip ok: {} nodes", back.num_nodes());

    // masks can be re-derived from the labels
    let resplit = back
        .with_split(
            &SplitSpec::Stratified {
                train: 0.1,
                val: 0.1,
            },
            5,
        )
        .unwrap();
    println!(
        "stratified re-split: {} train / {} val / {} test",
        resplit.train_nodes().len(),
        resplit.val_nodes().len(),
        resplit.test_nodes().len()
    );
}
