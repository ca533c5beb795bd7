use std::sync::Arc;

use super::*;
use crate::graph::Split;
use crate::testutil::{check_gradients, random_tensor};

/// 12 nodes, 3 classes, a ring plus chords so hop 2 is non-trivial.
fn fixture(feature_dim: usize, seed: u64) -> GraphBundle {
    let n = 12;
    let mut edges: Vec<(usize, usize)> = (0..n).map(|i| (i, (i + 1) % n)).collect();
    edges.extend([(0, 6), (2, 9), (4, 7)]);
    let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
    let splits = (0..n)
        .map(|i| match i % 4 {
            0 | 1 => Split::Train,
            2 => Split::Val,
            _ => Split::Test,
        })
        .collect();
    GraphBundle::new(
        3,
        random_tensor(&[n, feature_dim], seed),
        edges,
        labels,
        splits,
    )
    .unwrap()
}

fn small_config(kind: ModelKind) -> ModelConfig {
    ModelConfig {
        hidden: 4,
        ..ModelConfig::defaults(kind)
    }
}

const KINDS: [ModelKind; 3] = [
    ModelKind::Gcn,
    ModelKind::ResidualGnn,
    ModelKind::MultiHopGat,
];

#[test]
fn zero_weights_give_zero_logits() {
    let bundle = fixture(5, 1);
    for kind in KINDS {
        let cfg = small_config(kind);
        let s = Structure::for_model(&bundle, &cfg).unwrap();
        let mut model = ExpertModel::for_bundle(&cfg, &bundle, 0).unwrap();
        for t in model.params_mut().tensors_mut() {
            t.values_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let logits = model.logits(&bundle, &s).unwrap();
        assert!(logits.values().iter().all(|&v| v == 0.0), "{kind}");
        let p = model.predict_proba(&bundle, &s).unwrap();
        assert!(p.values().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }
}

#[test]
fn single_node_gcn_is_a_perceptron() {
    let x = Tensor::from_rows(&[vec![0.5, -1.0, 2.0]]);
    let bundle = GraphBundle::new(2, x.clone(), [], vec![0], vec![Split::Train]).unwrap();
    let cfg = small_config(ModelKind::Gcn);
    let s = Structure::for_model(&bundle, &cfg).unwrap();
    let model = ExpertModel::for_bundle(&cfg, &bundle, 4).unwrap();
    let (w0, w1) = (&model.params().tensors()[0], &model.params().tensors()[1]);
    let hidden: Vec<f64> = (0..4)
        .map(|j| {
            (0..3)
                .map(|k| x.get(0, k) * w0.get(k, j))
                .sum::<f64>()
                .max(0.0)
        })
        .collect();
    let expected: Vec<f64> = (0..2)
        .map(|c| (0..4).map(|j| hidden[j] * w1.get(j, c)).sum())
        .collect();
    let logits = model.logits(&bundle, &s).unwrap();
    for (c, e) in expected.iter().enumerate() {
        assert!((logits.get(0, c) - e).abs() < 1e-12);
    }
}

fn head_params(tape: &mut Tape, d_in: usize, d_out: usize, seed: u64) -> AttentionHead {
    AttentionHead {
        weight: tape.leaf(random_tensor(&[d_in, d_out], seed)),
        attn_src: tape.leaf(random_tensor(&[d_out, 1], seed + 1)),
        attn_dst: tape.leaf(random_tensor(&[d_out, 1], seed + 2)),
    }
}

#[test]
fn self_only_attention_returns_transformed_features() {
    let mut tape = Tape::new();
    let h_val = random_tensor(&[4, 3], 8);
    let h = tape.constant(h_val.clone());
    let head = head_params(&mut tape, 3, 2, 20);
    let hop = Arc::new(SparseMatrix::identity(4));
    let out = gat_attention(&mut tape, h, &hop, &head).unwrap();
    let w = tape.value(head.weight).clone();
    assert!(tape.value(out.alpha).values().iter().all(|&a| a == 1.0));
    for i in 0..4 {
        for j in 0..2 {
            let wh: f64 = (0..3).map(|k| h_val.get(i, k) * w.get(k, j)).sum();
            assert!((tape.value(out.out).get(i, j) - wh).abs() < 1e-14);
        }
    }
}

#[test]
fn identical_features_give_uniform_attention() {
    let bundle = fixture(3, 2);
    let hop = Arc::new(normalize_adjacency(bundle.edges(), 12));
    let mut tape = Tape::new();
    let row = [0.3, -0.7, 1.1];
    let h = tape.constant(Tensor::from_rows(&vec![row.to_vec(); 12]));
    let head = head_params(&mut tape, 3, 2, 5);
    let out = gat_attention(&mut tape, h, &hop, &head).unwrap();
    let alpha = tape.value(out.alpha);
    for i in 0..12 {
        let r = hop.row_range(i);
        let k = r.len() as f64;
        for e in r {
            assert!((alpha.values()[e] - 1.0 / k).abs() < 1e-14);
        }
    }
}

#[test]
fn attention_matches_dense_recomputation() {
    let edges = [(0, 1), (1, 2), (2, 3), (3, 4), (0, 3)];
    let hop = Arc::new(normalize_adjacency(&edges, 5));
    let h_val = random_tensor(&[5, 4], 31);
    let mut tape = Tape::new();
    let h = tape.constant(h_val.clone());
    let head = head_params(&mut tape, 4, 3, 40);
    let out = gat_attention(&mut tape, h, &hop, &head).unwrap();
    let (w, a_src, a_dst) = (
        tape.value(head.weight).clone(),
        tape.value(head.attn_src).clone(),
        tape.value(head.attn_dst).clone(),
    );
    let wh: Vec<Vec<f64>> = (0..5)
        .map(|i| {
            (0..3)
                .map(|j| (0..4).map(|k| h_val.get(i, k) * w.get(k, j)).sum())
                .collect()
        })
        .collect();
    // a^T [Wh_i || Wh_j] with a = [a_src ; a_dst]
    let a: Vec<f64> = a_src
        .values()
        .iter()
        .chain(a_dst.values())
        .copied()
        .collect();
    let mut adj = [[false; 5]; 5];
    for &(u, v) in &edges {
        adj[u][v] = true;
        adj[v][u] = true;
    }
    for (i, row) in adj.iter_mut().enumerate() {
        row[i] = true;
    }
    for i in 0..5 {
        let nbrs: Vec<usize> = (0..5).filter(|&j| adj[i][j]).collect();
        let e: Vec<f64> = nbrs
            .iter()
            .map(|&j| {
                let cat: Vec<f64> = wh[i].iter().chain(&wh[j]).copied().collect();
                let s: f64 = cat.iter().zip(&a).map(|(x, y)| x * y).sum();
                if s > 0.0 {
                    s
                } else {
                    0.2 * s
                }
            })
            .collect();
        let z: f64 = e.iter().map(|v| v.exp()).sum();
        let alpha: Vec<f64> = e.iter().map(|v| v.exp() / z).collect();
        let got = &tape.value(out.alpha).values()[hop.row_range(i)];
        assert_eq!(hop.row_indices(i), nbrs.as_slice());
        assert!((got.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (g, want) in got.iter().zip(&alpha) {
            assert!((g - want).abs() < 1e-10);
        }
        #[allow(clippy::needless_range_loop)]
        for c in 0..3 {
            let want: f64 = nbrs.iter().zip(&alpha).map(|(&j, a)| a * wh[j][c]).sum();
            assert!((tape.value(out.out).get(i, c) - want).abs() < 1e-10);
        }
    }
}

#[test]
fn single_hop_model_is_a_two_head_attention_layer() {
    let bundle = fixture(5, 3);
    let cfg = ModelConfig {
        hops: 1,
        ..small_config(ModelKind::MultiHopGat)
    };
    let s = Structure::for_model(&bundle, &cfg).unwrap();
    let model = ExpertModel::for_bundle(&cfg, &bundle, 9).unwrap();
    let ExpertModel::MultiHopGat(gat) = &model else {
        unreachable!()
    };
    assert_eq!(gat.hop_weights(), vec![1.0]);
    let emb = model.embed(&bundle, &s).unwrap();

    let mut tape = Tape::new();
    let p = model.params().bind(&mut tape);
    let x = tape.constant_arc(Arc::clone(bundle.features()));
    let hop = s.hops.as_ref().unwrap().hop(1);
    let mut outs = Vec::new();
    for h in 0..2 {
        let head = AttentionHead {
            weight: p[3 * h],
            attn_src: p[3 * h + 1],
            attn_dst: p[3 * h + 2],
        };
        outs.push(gat_attention(&mut tape, x, hop, &head).unwrap().out);
    }
    let cat = tape.concat_cols(&outs).unwrap();
    let normed = tape.layer_norm(cat, p[7], p[8], LAYER_NORM_EPS).unwrap();
    let act = tape.relu(normed);
    let skip = tape.matmul(x, p[9]).unwrap();
    let manual = tape.add(act, skip).unwrap();
    let diff = tape
        .value(manual)
        .values()
        .iter()
        .zip(emb.values())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(diff < 1e-12, "{diff}");
}

#[test]
fn zero_hop_logits_mix_equally() {
    let model = ExpertModel::new(&small_config(ModelKind::MultiHopGat), 5, 3, 0).unwrap();
    let ExpertModel::MultiHopGat(gat) = &model else {
        unreachable!()
    };
    assert_eq!(gat.hop_weights(), vec![0.5, 0.5]);
    let mut m = gat.clone();
    let idx = m.hop_logits_index();
    m.params.tensors_mut()[idx] = Tensor::from_rows(&[vec![3.0, -1.5]]);
    assert!((m.hop_weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

fn model_loss(
    model: &ExpertModel,
    bundle: &GraphBundle,
    s: &Structure,
    tape: &mut Tape,
    p: &[Var],
) -> Var {
    let x = tape.constant_arc(Arc::clone(bundle.features()));
    let (logits, _) = model
        .forward_with(tape, p, x, s, Mode::Train { epoch: 3 })
        .unwrap();
    let logp = tape.log_softmax(logits);
    let rows: Vec<usize> = (0..bundle.num_nodes()).collect();
    tape.masked_nll(logp, &rows, bundle.labels(), None).unwrap()
}

#[test]
fn whole_model_gradients_match_finite_differences() {
    for seed in 0..10 {
        let bundle = fixture(5, 100 + seed);
        for kind in KINDS {
            let cfg = small_config(kind);
            let s = Structure::for_model(&bundle, &cfg).unwrap();
            let mut model = ExpertModel::for_bundle(&cfg, &bundle, seed).unwrap();
            // move norm gains, biases and hop logits off their initial values
            for (k, t) in model.params_mut().tensors_mut().iter_mut().enumerate() {
                let noise = random_tensor(t.shape(), 1000 * seed + k as u64);
                for (v, e) in t.values_mut().iter_mut().zip(noise.values()) {
                    *v += 0.3 * e;
                }
            }
            let inputs = model.params().tensors().to_vec();
            let err = check_gradients(&inputs, |tape, p| model_loss(&model, &bundle, &s, tape, p));
            assert!(err < 1e-4, "{kind} seed {seed}: {err}");
        }
    }
}

#[test]
fn embeddings_have_the_configured_width_and_repeat() {
    let bundle = fixture(5, 6);
    for kind in KINDS {
        let cfg = small_config(kind);
        let s = Structure::for_model(&bundle, &cfg).unwrap();
        let model = ExpertModel::for_bundle(&cfg, &bundle, 2).unwrap();
        let a = model.embed(&bundle, &s).unwrap();
        assert_eq!(a.shape(), &[12, cfg.embedding_dim()]);
        assert_eq!(a, model.embed(&bundle, &s).unwrap());
    }
}

#[test]
fn mismatched_bundle_is_rejected() {
    let bundle = fixture(5, 6);
    let model = ExpertModel::new(&small_config(ModelKind::Gcn), 4, 3, 0).unwrap();
    let s = Structure::for_model(&bundle, model.config()).unwrap();
    assert!(matches!(
        model.logits(&bundle, &s),
        Err(ModelError::Mismatch { .. })
    ));
}
