use rand_chacha::ChaCha8Rng;

use super::{glorot, Mode, ModelConfig, ParamSet, Result, Structure};
use crate::tensor::{Tape, Var};

/// Two-layer GCN: `Â · relu(Â · X · W0) · W1`, with dropout on the input and
/// on the hidden layer.
#[derive(Debug, Clone, PartialEq)]
pub struct GcnModel {
    pub(crate) config: ModelConfig,
    pub(crate) feature_dim: usize,
    pub(crate) num_classes: usize,
    pub(crate) seed: u64,
    pub(crate) params: ParamSet,
}

impl GcnModel {
    pub(crate) fn new(
        config: &ModelConfig,
        feature_dim: usize,
        num_classes: usize,
        seed: u64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut params = ParamSet::new();
        params.push("w0", glorot(rng, feature_dim, config.hidden));
        params.push("w1", glorot(rng, config.hidden, num_classes));
        GcnModel {
            config: config.clone(),
            feature_dim,
            num_classes,
            seed,
            params,
        }
    }

    pub(crate) fn forward_with(
        &self,
        tape: &mut Tape,
        p: &[Var],
        x: Var,
        s: &Structure,
        mode: Mode,
    ) -> Result<(Var, Var)> {
        let rate = self.config.dropout;
        let x = mode.dropout(tape, x, rate, self.seed, 0)?;
        let xw = tape.matmul(x, p[0])?;
        let agg = tape.spmm(&s.adjacency, xw)?;
        let hidden = tape.relu(agg);
        let h = mode.dropout(tape, hidden, rate, self.seed, 1)?;
        let hw = tape.matmul(h, p[1])?;
        let logits = tape.spmm(&s.adjacency, hw)?;
        Ok((logits, hidden))
    }
}
