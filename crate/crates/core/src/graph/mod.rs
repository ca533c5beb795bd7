//! Graph datasets and the sparse structure derived from them.

mod adjacency;
mod io;
mod sbm;

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::Tensor;

pub use adjacency::{build_hopset, normalize_adjacency, HopSet};
pub use io::{read_bundle, write_bundle, BundleMeta, BUNDLE_MAGIC};
pub use sbm::{generate_sbm, SbmConfig};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("invalid bundle: {field}: {detail}")]
    Invalid { field: &'static str, detail: String },
    #[error("{file}: truncated: expected {expected} bytes, found {actual}")]
    Truncated {
        file: &'static str,
        expected: u64,
        actual: u64,
    },
    #[error("{file} at byte {offset}: {detail}")]
    Corrupt {
        file: &'static str,
        offset: u64,
        detail: String,
    },
    #[error("bad magic {found:?}, expected {BUNDLE_MAGIC:?}")]
    Magic { found: String },
    #[error("configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("meta.json: {0}")]
    Meta(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, GraphError>;

/// Which split a node belongs to. Encoded on disk as one byte.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Unused = 0,
    Train = 1,
    Val = 2,
    Test = 3,
}

impl Split {
    pub fn from_byte(b: u8) -> Option<Split> {
        match b {
            0 => Some(Split::Unused),
            1 => Some(Split::Train),
            2 => Some(Split::Val),
            3 => Some(Split::Test),
            _ => None,
        }
    }
}

/// How to re-derive train/val/test masks from labels.
#[derive(Debug, Clone, PartialEq)]
pub enum SplitSpec {
    /// Per-class shuffled fractions for train and val; the rest is test.
    Stratified { train: f64, val: f64 },
    /// `per_class` training nodes of every class, then `val` and `test` nodes
    /// drawn from the remainder.
    Planetoid {
        per_class: usize,
        val: usize,
        test: usize,
    },
}

impl std::str::FromStr for SplitSpec {
    type Err = GraphError;

    /// `stratified:0.6,0.2` or `planetoid:20,500,1000`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || GraphError::Config(format!("unrecognised split spec {s:?}"));
        let (kind, args) = s.split_once(':').ok_or_else(bad)?;
        let parts: Vec<&str> = args.split(',').map(str::trim).collect();
        match (kind, parts.as_slice()) {
            ("stratified", [t, v]) => Ok(SplitSpec::Stratified {
                train: t.parse().map_err(|_| bad())?,
                val: v.parse().map_err(|_| bad())?,
            }),
            ("planetoid", [p, v, t]) => Ok(SplitSpec::Planetoid {
                per_class: p.parse().map_err(|_| bad())?,
                val: v.parse().map_err(|_| bad())?,
                test: t.parse().map_err(|_| bad())?,
            }),
            _ => Err(bad()),
        }
    }
}

/// An immutable node-classification dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphBundle {
    num_nodes: usize,
    num_classes: usize,
    features: Arc<Tensor>,
    edges: Vec<(usize, usize)>,
    labels: Vec<usize>,
    splits: Vec<Split>,
}

impl GraphBundle {
    /// Assembles a bundle. Edges are symmetrized, deduplicated and sorted;
    /// self-loops are dropped (propagation operators add their own).
    pub fn new(
        num_classes: usize,
        features: Tensor,
        edges: impl IntoIterator<Item = (usize, usize)>,
        labels: Vec<usize>,
        splits: Vec<Split>,
    ) -> Result<Self> {
        let num_nodes = labels.len();
        let mut canon: Vec<(usize, usize)> = Vec::new();
        for (a, b) in edges {
            if a >= num_nodes || b >= num_nodes {
                return Err(GraphError::Invalid {
                    field: "edges",
                    detail: format!("edge ({a}, {b}) references a node >= {num_nodes}"),
                });
            }
            if a != b {
                canon.push((a, b));
                canon.push((b, a));
            }
        }
        canon.sort_unstable();
        canon.dedup();
        let bundle = GraphBundle {
            num_nodes,
            num_classes,
            features: Arc::new(features),
            edges: canon,
            labels,
            splits,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    /// Checks every structural invariant.
    pub fn validate(&self) -> Result<()> {
        let n = self.num_nodes;
        let invalid = |field, detail: String| Err(GraphError::Invalid { field, detail });
        if self.features.rows() != n || self.features.shape().len() != 2 {
            return invalid(
                "features",
                format!("shape {:?} does not have {n} rows", self.features.shape()),
            );
        }
        if let Some(k) = self.features.values().iter().position(|v| !v.is_finite()) {
            return invalid("features", format!("non-finite value at index {k}"));
        }
        if self.splits.len() != n {
            return invalid(
                "masks",
                format!("{} entries for {n} nodes", self.splits.len()),
            );
        }
        if self.num_classes == 0 {
            return invalid("num_classes", "must be positive".into());
        }
        if let Some((i, &y)) = self
            .labels
            .iter()
            .enumerate()
            .find(|(_, &y)| y >= self.num_classes)
        {
            return invalid(
                "labels",
                format!("node {i} has label {y} >= {}", self.num_classes),
            );
        }
        for w in self.edges.windows(2) {
            if w[0] >= w[1] {
                return invalid("edges", format!("not strictly sorted at {:?}", w[1]));
            }
        }
        for &(a, b) in &self.edges {
            if a >= n || b >= n {
                return invalid("edges", format!("edge ({a}, {b}) out of range"));
            }
            if a == b {
                return invalid("edges", format!("self-loop on node {a}"));
            }
            if self.edges.binary_search(&(b, a)).is_err() {
                return invalid("edges", format!("edge ({a}, {b}) has no reverse"));
            }
        }
        Ok(())
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Arc<Tensor> {
        &self.features
    }

    /// Directed pairs; each undirected edge appears in both directions.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn num_undirected_edges(&self) -> usize {
        self.edges.len() / 2
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    /// Node ids in `split`, ascending.
    pub fn nodes_in(&self, split: Split) -> Vec<usize> {
        (0..self.num_nodes)
            .filter(|&i| self.splits[i] == split)
            .collect()
    }

    pub fn train_nodes(&self) -> Vec<usize> {
        self.nodes_in(Split::Train)
    }

    pub fn val_nodes(&self) -> Vec<usize> {
        self.nodes_in(Split::Val)
    }

    pub fn test_nodes(&self) -> Vec<usize> {
        self.nodes_in(Split::Test)
    }

    /// Copy with masks re-derived from labels.
    pub fn with_split(&self, spec: &SplitSpec, seed: u64) -> Result<GraphBundle> {
        let splits = make_split(&self.labels, self.num_classes, spec, seed)?;
        Ok(GraphBundle {
            splits,
            ..self.clone()
        })
    }
}

pub(crate) fn make_split(
    labels: &[usize],
    num_classes: usize,
    spec: &SplitSpec,
    seed: u64,
) -> Result<Vec<Split>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    for members in &mut by_class {
        members.shuffle(&mut rng);
    }
    let mut splits = vec![Split::Unused; labels.len()];
    match *spec {
        SplitSpec::Stratified { train, val } => {
            if !(0.0..=1.0).contains(&train) || !(0.0..=1.0).contains(&val) || train + val > 1.0 {
                return Err(GraphError::Config(format!(
                    "split fractions {train}, {val} are not a partition of [0, 1]"
                )));
            }
            for members in &by_class {
                let n = members.len() as f64;
                let n_train = (train * n).round() as usize;
                let n_val = ((val * n).round() as usize).min(members.len() - n_train);
                for (k, &i) in members.iter().enumerate() {
                    splits[i] = if k < n_train {
                        Split::Train
                    } else if k < n_train + n_val {
                        Split::Val
                    } else {
                        Split::Test
                    };
                }
            }
        }
        SplitSpec::Planetoid {
            per_class,
            val,
            test,
        } => {
            let mut rest = Vec::new();
            for members in &by_class {
                if members.len() < per_class {
                    return Err(GraphError::Config(format!(
                        "a class has {} nodes, fewer than {per_class} training nodes",
                        members.len()
                    )));
                }
                for &i in &members[..per_class] {
                    splits[i] = Split::Train;
                }
                rest.extend_from_slice(&members[per_class..]);
            }
            rest.sort_unstable();
            rest.shuffle(&mut rng);
            if rest.len() < val + test {
                return Err(GraphError::Config(format!(
                    "{} nodes left for {val} validation and {test} test nodes",
                    rest.len()
                )));
            }
            for &i in &rest[..val] {
                splits[i] = Split::Val;
            }
            for &i in &rest[val..val + test] {
                splits[i] = Split::Test;
            }
        }
    }
    Ok(splits)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_canonicalizes_edges() {
        let b = GraphBundle::new(
            2,
            Tensor::zeros(&[3, 2]),
            [(0, 1), (1, 0), (2, 1), (1, 1)],
            vec![0, 1, 0],
            vec![Split::Train, Split::Val, Split::Test],
        )
        .unwrap();
        assert_eq!(b.edges(), &[(0, 1), (1, 0), (1, 2), (2, 1)]);
        assert_eq!(b.num_undirected_edges(), 2);
    }

    #[test]
    fn new_rejects_bad_labels_and_ids() {
        let err = GraphBundle::new(
            2,
            Tensor::zeros(&[2, 1]),
            [],
            vec![0, 2],
            vec![Split::Train; 2],
        );
        assert!(matches!(
            err,
            Err(GraphError::Invalid {
                field: "labels",
                ..
            })
        ));
        let err = GraphBundle::new(
            2,
            Tensor::zeros(&[2, 1]),
            [(0, 5)],
            vec![0, 1],
            vec![Split::Train; 2],
        );
        assert!(matches!(
            err,
            Err(GraphError::Invalid { field: "edges", .. })
        ));
    }

    #[test]
    fn split_specs_parse_and_partition() {
        let spec: SplitSpec = "planetoid:2,3,4".parse().unwrap();
        assert_eq!(
            spec,
            SplitSpec::Planetoid {
                per_class: 2,
                val: 3,
                test: 4
            }
        );
        assert!("bogus".parse::<SplitSpec>().is_err());

        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let splits = make_split(&labels, 3, &spec, 1).unwrap();
        let count = |s| splits.iter().filter(|&&x| x == s).count();
        assert_eq!(
            (count(Split::Train), count(Split::Val), count(Split::Test)),
            (6, 3, 4)
        );
        for c in 0..3 {
            let train_c = (0..30)
                .filter(|&i| labels[i] == c && splits[i] == Split::Train)
                .count();
            assert_eq!(train_c, 2);
        }

        let strat = make_split(
            &labels,
            3,
            &SplitSpec::Stratified {
                train: 0.6,
                val: 0.2,
            },
            1,
        )
        .unwrap();
        assert_eq!(strat.iter().filter(|&&x| x == Split::Train).count(), 18);
        assert_eq!(strat.iter().filter(|&&x| x == Split::Val).count(), 6);
    }
}
