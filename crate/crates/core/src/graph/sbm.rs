use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{make_split, GraphBundle, GraphError, Result, SplitSpec};
use crate::tensor::Tensor;

/// Stochastic block model with Gaussian class-mean features.
///
/// Block `c` holds nodes of class `c`. An edge between a node of block `a`
/// and one of block `b` appears with probability `edge_prob[a][b]`. Node
/// features are `signal[c] · e_c + N(0, I)`, rounded to `f32` so a bundle
/// survives a write/read round trip unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct SbmConfig {
    pub block_sizes: Vec<usize>,
    pub edge_prob: Vec<Vec<f64>>,
    pub feature_dim: usize,
    pub signal: Vec<f64>,
    pub split: SplitSpec,
    pub seed: u64,
}

impl SbmConfig {
    /// Uniform within/between-block probabilities and one signal strength.
    pub fn planted(
        block_sizes: &[usize],
        p_in: f64,
        p_out: f64,
        feature_dim: usize,
        class_signal: f64,
        seed: u64,
    ) -> Self {
        let c = block_sizes.len();
        let edge_prob = (0..c)
            .map(|a| (0..c).map(|b| if a == b { p_in } else { p_out }).collect())
            .collect();
        SbmConfig {
            block_sizes: block_sizes.to_vec(),
            edge_prob,
            feature_dim,
            signal: vec![class_signal; c],
            split: SplitSpec::Stratified {
                train: 0.6,
                val: 0.2,
            },
            seed,
        }
    }

    /// Three-class citation-like graph: 3000 nodes in blocks of 600/1200/1200,
    /// average degree near 4, 50 features, Planetoid masks (20 per class,
    /// 500 validation, 1000 test).
    ///
    /// Class 2 is the hard one. Its features are weaker and a larger share of
    /// its edges cross into the other two blocks.
    pub fn pubmed_like(seed: u64) -> Self {
        let px = 0.0006;
        SbmConfig {
            block_sizes: vec![600, 1200, 1200],
            edge_prob: vec![
                vec![0.007, 0.0003, px],
                vec![0.0003, 0.0035, px],
                vec![px, px, 0.0025],
            ],
            feature_dim: 50,
            signal: vec![2.0, 2.0, 1.2],
            split: SplitSpec::Planetoid {
                per_class: 20,
                val: 500,
                test: 1000,
            },
            seed,
        }
    }

    fn check(&self) -> Result<()> {
        let c = self.block_sizes.len();
        let fail = |msg: String| Err(GraphError::Config(msg));
        if c == 0 || self.block_sizes.contains(&0) {
            return fail(format!(
                "block sizes {:?} must be non-empty and positive",
                self.block_sizes
            ));
        }
        if c > u16::MAX as usize {
            return fail(format!("{c} blocks exceed the label range"));
        }
        if self.feature_dim < c {
            return fail(format!(
                "feature_dim {} cannot hold {c} orthogonal class means",
                self.feature_dim
            ));
        }
        if self.edge_prob.len() != c || self.edge_prob.iter().any(|r| r.len() != c) {
            return fail("edge probability matrix must be blocks x blocks".into());
        }
        for (a, row) in self.edge_prob.iter().enumerate() {
            for (b, &p) in row.iter().enumerate() {
                if !(0.0..=1.0).contains(&p) {
                    return fail(format!("edge probability {p} outside [0, 1]"));
                }
                if p != self.edge_prob[b][a] {
                    return fail("edge probability matrix must be symmetric".into());
                }
            }
        }
        if self.signal.len() != c || self.signal.iter().any(|s| !s.is_finite()) {
            return fail("one finite signal strength per block is required".into());
        }
        Ok(())
    }

    pub fn generate(&self) -> Result<GraphBundle> {
        self.check()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let labels: Vec<usize> = self
            .block_sizes
            .iter()
            .enumerate()
            .flat_map(|(c, &size)| std::iter::repeat_n(c, size))
            .collect();
        let n = labels.len();
        let mut edges = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if rng.random::<f64>() < self.edge_prob[labels[i]][labels[j]] {
                    edges.push((i, j));
                }
            }
        }
        let d = self.feature_dim;
        let mut values = Vec::with_capacity(n * d);
        for &y in &labels {
            for k in 0..d {
                let noise: f64 = rng.sample(StandardNormal);
                let mean = if k == y { self.signal[y] } else { 0.0 };
                values.push((mean + noise) as f32 as f64);
            }
        }
        let features = Tensor::from_vec(vec![n, d], values).expect("sized above");
        let split_seed = rng.random::<u64>();
        let splits = make_split(&labels, self.block_sizes.len(), &self.split, split_seed)?;
        GraphBundle::new(self.block_sizes.len(), features, edges, labels, splits)
    }
}

/// Planted-partition graph with stratified 60/20/20 masks.
pub fn generate_sbm(
    block_sizes: &[usize],
    p_in: f64,
    p_out: f64,
    feature_dim: usize,
    class_signal: f64,
    seed: u64,
) -> Result<GraphBundle> {
    SbmConfig::planted(block_sizes, p_in, p_out, feature_dim, class_signal, seed).generate()
}
