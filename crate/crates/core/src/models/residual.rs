use rand_chacha::ChaCha8Rng;

use super::{glorot, Mode, ModelConfig, ParamSet, Result, Structure, LAYER_NORM_EPS};
use crate::tensor::{Tape, Tensor, Var};

/// GCN with layer normalization and residual connections.
///
/// Each of the two graph convolutions computes
/// `relu(LN(Â · h · W)) + residual(h)`, where the residual is a learned
/// projection when the width changes and the identity otherwise. A linear
/// map reads class logits off the second layer, whose output is the
/// embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualGnnModel {
    pub(crate) config: ModelConfig,
    pub(crate) feature_dim: usize,
    pub(crate) num_classes: usize,
    pub(crate) seed: u64,
    pub(crate) params: ParamSet,
}

const W0: usize = 0;
const G0: usize = 1;
const B0: usize = 2;

impl ResidualGnnModel {
    pub(crate) fn new(
        config: &ModelConfig,
        feature_dim: usize,
        num_classes: usize,
        seed: u64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let h = config.hidden;
        let mut params = ParamSet::new();
        params.push("conv0.weight", glorot(rng, feature_dim, h));
        params.push("conv0.norm.gain", Tensor::full(&[h], 1.0));
        params.push("conv0.norm.bias", Tensor::zeros(&[h]));
        if feature_dim != h {
            params.push("conv0.residual", glorot(rng, feature_dim, h));
        }
        params.push("conv1.weight", glorot(rng, h, h));
        params.push("conv1.norm.gain", Tensor::full(&[h], 1.0));
        params.push("conv1.norm.bias", Tensor::zeros(&[h]));
        params.push("classifier", glorot(rng, h, num_classes));
        ResidualGnnModel {
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
        let projected = self.feature_dim != self.config.hidden;
        let base = if projected { 4 } else { 3 };
        let (w1, g1, b1, out) = (base, base + 1, base + 2, base + 3);
        let x = mode.dropout(tape, x, rate, self.seed, 0)?;

        let xw = tape.matmul(x, p[W0])?;
        let agg = tape.spmm(&s.adjacency, xw)?;
        let normed = tape.layer_norm(agg, p[G0], p[B0], LAYER_NORM_EPS)?;
        let act = tape.relu(normed);
        let skip = if projected { tape.matmul(x, p[3])? } else { x };
        let h1 = tape.add(act, skip)?;
        let h1 = mode.dropout(tape, h1, rate, self.seed, 1)?;

        let hw = tape.matmul(h1, p[w1])?;
        let agg = tape.spmm(&s.adjacency, hw)?;
        let normed = tape.layer_norm(agg, p[g1], p[b1], LAYER_NORM_EPS)?;
        let act = tape.relu(normed);
        let h2 = tape.add(act, h1)?;

        let h = mode.dropout(tape, h2, rate, self.seed, 2)?;
        let logits = tape.matmul(h, p[out])?;
        Ok((logits, h2))
    }
}
