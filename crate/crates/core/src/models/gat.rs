use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use super::{
    glorot, Mode, ModelConfig, ModelError, ParamSet, Result, Structure, ATTENTION_SLOPE,
    LAYER_NORM_EPS,
};
use crate::sparse::SparseMatrix;
use crate::tensor::{Tape, Tensor, Var};

/// Parameters of one attention head: the feature transform `W` and the two
/// halves of the attention vector `a = [a_src ; a_dst]`.
#[derive(Debug, Clone, Copy)]
pub struct AttentionHead {
    pub weight: Var,
    pub attn_src: Var,
    pub attn_dst: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct GatOutput {
    /// `n × d'` aggregated features.
    pub out: Var,
    /// Attention coefficients, one per stored entry of the hop matrix (CSR order).
    pub alpha: Var,
}

/// Single-head graph attention over the neighbor sets given by `hop`:
///
/// `α_ij = softmax_j LeakyReLU(a_srcᵀ W h_i + a_dstᵀ W h_j)` over the stored
/// entries of row `i`, and `out_i = Σ_j α_ij W h_j`.
pub fn gat_attention(
    tape: &mut Tape,
    h: Var,
    hop: &Arc<SparseMatrix>,
    head: &AttentionHead,
) -> Result<GatOutput> {
    if hop.nrows() != hop.ncols() || hop.nrows() != tape.value(h).rows() {
        return Err(ModelError::Mismatch {
            expected: format!("square hop matrix over {} nodes", tape.value(h).rows()),
            found: format!("{}x{}", hop.nrows(), hop.ncols()),
        });
    }
    let wh = tape.matmul(h, head.weight)?;
    let src = tape.matmul(wh, head.attn_src)?;
    let dst = tape.matmul(wh, head.attn_dst)?;
    let scores = tape.edge_scores(hop, src, dst)?;
    let scores = tape.leaky_relu(scores, ATTENTION_SLOPE);
    let alpha = tape.edge_softmax(hop, scores)?;
    let out = tape.edge_spmm(hop, alpha, wh)?;
    Ok(GatOutput { out, alpha })
}

/// Multi-hop graph attention network.
///
/// Hidden layer: for each hop k, `heads` attention heads over the exactly-k-hop
/// neighbor sets are concatenated into `z_k`; hops are mixed as
/// `Σ_k softmax(β)_k z_k`, then layer-normalized, activated and added to a
/// projection of the input. That sum is the embedding. The output layer is a
/// `heads`-head attention layer over hop 1 whose heads are averaged.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiHopGatModel {
    pub(crate) config: ModelConfig,
    pub(crate) feature_dim: usize,
    pub(crate) num_classes: usize,
    pub(crate) seed: u64,
    pub(crate) params: ParamSet,
}

impl MultiHopGatModel {
    pub(crate) fn new(
        config: &ModelConfig,
        feature_dim: usize,
        num_classes: usize,
        seed: u64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let (d, heads, hops) = (config.hidden, config.heads, config.hops);
        let width = d * heads;
        let mut params = ParamSet::new();
        for k in 1..=hops {
            for h in 0..heads {
                params.push(
                    format!("hop{k}.head{h}.weight"),
                    glorot(rng, feature_dim, d),
                );
                params.push(format!("hop{k}.head{h}.attn_src"), glorot(rng, d, 1));
                params.push(format!("hop{k}.head{h}.attn_dst"), glorot(rng, d, 1));
            }
        }
        params.push("hop_logits", Tensor::zeros(&[1, hops]));
        params.push("norm.gain", Tensor::full(&[width], 1.0));
        params.push("norm.bias", Tensor::zeros(&[width]));
        params.push("residual", glorot(rng, feature_dim, width));
        for h in 0..heads {
            params.push(
                format!("out.head{h}.weight"),
                glorot(rng, width, num_classes),
            );
            params.push(format!("out.head{h}.attn_src"), glorot(rng, num_classes, 1));
            params.push(format!("out.head{h}.attn_dst"), glorot(rng, num_classes, 1));
        }
        MultiHopGatModel {
            config: config.clone(),
            feature_dim,
            num_classes,
            seed,
            params,
        }
    }

    fn head(p: &[Var], base: usize) -> AttentionHead {
        AttentionHead {
            weight: p[base],
            attn_src: p[base + 1],
            attn_dst: p[base + 2],
        }
    }

    /// Index of the hop-mixing logits in the parameter list.
    pub fn hop_logits_index(&self) -> usize {
        3 * self.config.hops * self.config.heads
    }

    /// Hop mixing weights `softmax(β)`.
    pub fn hop_weights(&self) -> Vec<f64> {
        let beta = &self.params.tensors()[self.hop_logits_index()];
        let max = beta
            .values()
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = beta.values().iter().map(|b| (b - max).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|v| v / z).collect()
    }

    /// Returns `(logits, embedding)`.
    pub(crate) fn forward_with(
        &self,
        tape: &mut Tape,
        p: &[Var],
        x: Var,
        s: &Structure,
        mode: Mode,
    ) -> Result<(Var, Var)> {
        let hopset = s
            .hops
            .as_ref()
            .ok_or_else(|| ModelError::Config("multi-hop GAT needs a hop set".into()))?;
        let (heads, hops) = (self.config.heads, self.config.hops);
        if hopset.num_hops() != hops {
            return Err(ModelError::Mismatch {
                expected: format!("{hops} hops"),
                found: format!("{} hops", hopset.num_hops()),
            });
        }
        let rate = self.config.dropout;
        let n = tape.value(x).rows();
        let width = self.config.hidden * heads;
        let x = mode.dropout(tape, x, rate, self.seed, 0)?;

        let beta_idx = self.hop_logits_index();
        let hop_weights = tape.row_softmax(p[beta_idx], None)?;
        let mut mixed: Option<Var> = None;
        for k in 1..=hops {
            let z_k = if hopset.is_empty_hop(k) {
                log::warn!("hop {k} is empty; contributing zeros");
                tape.constant(Tensor::zeros(&[n, width]))
            } else {
                let mut outs = Vec::with_capacity(heads);
                for h in 0..heads {
                    let head = Self::head(p, 3 * ((k - 1) * heads + h));
                    outs.push(gat_attention(tape, x, hopset.hop(k), &head)?.out);
                }
                tape.concat_cols(&outs)?
            };
            let w_k = tape.select(hop_weights, k - 1)?;
            let term = tape.mul(w_k, z_k)?;
            mixed = Some(match mixed {
                None => term,
                Some(acc) => tape.add(acc, term)?,
            });
        }
        let mixed = mixed.expect("at least one hop");
        let normed = tape.layer_norm(mixed, p[beta_idx + 1], p[beta_idx + 2], LAYER_NORM_EPS)?;
        let act = tape.relu(normed);
        let skip = tape.matmul(x, p[beta_idx + 3])?;
        let embedding = tape.add(act, skip)?;

        let h = mode.dropout(tape, embedding, rate, self.seed, 1)?;
        let out_base = beta_idx + 4;
        let mut logits: Option<Var> = None;
        for hd in 0..heads {
            let head = Self::head(p, out_base + 3 * hd);
            let o = gat_attention(tape, h, hopset.hop(1), &head)?.out;
            logits = Some(match logits {
                None => o,
                Some(acc) => tape.add(acc, o)?,
            });
        }
        let logits = tape.scale(logits.expect("at least one head"), 1.0 / heads as f64);
        Ok((logits, embedding))
    }
}
