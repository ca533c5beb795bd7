//! Wasserstein distances between weighted point clouds.
//!
//! [`exact_wr`] solves tiny instances exactly and serves as the reference;
//! [`sinkhorn_wr`] is the entropic solver used during training.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{splitmix64, sq_dist, Tape, Tensor, TensorError, Var};

/// Largest `m·n` accepted by [`exact_wr`].
pub const EXACT_MAX_CELLS: usize = 64;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("embedding dimensions differ: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("invalid cloud: {0}")]
    InvalidCloud(String),
    #[error("exact solver handles at most {EXACT_MAX_CELLS} cost cells, got {0}; use sinkhorn_wr")]
    TooLarge(usize),
    #[error("cost matrix has non-finite entries")]
    NonFiniteCost,
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, TransportError>;

/// Points with probability weights.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteCloud {
    points: Tensor,
    weights: Vec<f64>,
}

impl DiscreteCloud {
    pub fn new(points: Tensor, weights: Vec<f64>) -> Result<Self> {
        if points.shape().len() != 2 || points.rows() == 0 {
            return Err(TransportError::InvalidCloud(
                "points must be a non-empty matrix".into(),
            ));
        }
        if weights.len() != points.rows() {
            return Err(TransportError::InvalidCloud(format!(
                "{} weights for {} points",
                weights.len(),
                points.rows()
            )));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(TransportError::InvalidCloud(
                "weights must be finite and non-negative".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(TransportError::InvalidCloud(format!(
                "weights sum to {total}"
            )));
        }
        Ok(DiscreteCloud { points, weights })
    }

    pub fn uniform(points: Tensor) -> Result<Self> {
        let m = points.rows().max(1);
        DiscreteCloud::new(points, vec![1.0 / m as f64; m])
    }

    pub fn points(&self) -> &Tensor {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    fn is_uniform(&self) -> bool {
        let u = 1.0 / self.len() as f64;
        self.weights.iter().all(|&w| (w - u).abs() < 1e-15)
    }
}

/// A coupling between two clouds and its sharp cost `⟨γ, C⟩`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    /// `m × n` coupling.
    pub coupling: Tensor,
    pub cost: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Entropic solver settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SinkhornConfig {
    pub p: f64,
    /// Absolute regularization; when absent, `epsilon_scale · median(C)`.
    pub epsilon: Option<f64>,
    pub epsilon_scale: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        SinkhornConfig {
            p: 2.0,
            epsilon: None,
            epsilon_scale: 0.05,
            max_iters: 200,
            tol: 1e-6,
        }
    }
}

impl SinkhornConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p >= 1.0 && self.p.is_finite()) {
            return Err(TransportError::Config(format!(
                "p = {} must be >= 1",
                self.p
            )));
        }
        if let Some(e) = self.epsilon {
            if !(e > 0.0 && e.is_finite()) {
                return Err(TransportError::Config(format!("epsilon = {e} must be > 0")));
            }
        }
        if !(self.epsilon_scale > 0.0 && self.epsilon_scale.is_finite()) {
            return Err(TransportError::Config("epsilon_scale must be > 0".into()));
        }
        if self.max_iters == 0 || self.tol.is_nan() || self.tol <= 0.0 {
            return Err(TransportError::Config(
                "max_iters and tol must be positive".into(),
            ));
        }
        Ok(())
    }

    /// The regularization used for cost matrix `c`.
    pub fn epsilon_for(&self, c: &Tensor) -> f64 {
        if let Some(e) = self.epsilon {
            return e;
        }
        let mut v: Vec<f64> = c.values().to_vec();
        v.sort_by(f64::total_cmp);
        let mid = v.len() / 2;
        let median = if v.len() % 2 == 1 {
            v[mid]
        } else {
            0.5 * (v[mid - 1] + v[mid])
        };
        let scale = if median > 0.0 {
            median
        } else {
            v.last().copied().unwrap_or(0.0)
        };
        // all costs zero: every coupling is optimal, any ε works
        if scale > 0.0 {
            self.epsilon_scale * scale
        } else {
            1.0
        }
    }
}

/// `C[i][j] = ‖x_i − y_j‖₂^p`.
pub fn cost_matrix(a: &DiscreteCloud, b: &DiscreteCloud, p: f64) -> Result<Tensor> {
    let (x, y) = (a.points(), b.points());
    if x.cols() != y.cols() {
        return Err(TransportError::DimMismatch(x.cols(), y.cols()));
    }
    let (m, n) = (x.rows(), y.rows());
    let mut c = Vec::with_capacity(m * n);
    for i in 0..m {
        for j in 0..n {
            let d = sq_dist(x.row(i), y.row(j)).sqrt();
            c.push(if p == 2.0 { d * d } else { d.powf(p) });
        }
    }
    Ok(Tensor::from_vec(vec![m, n], c)?)
}

fn plan_cost(plan: &[f64], c: &[f64]) -> f64 {
    plan.iter().zip(c).map(|(g, c)| g * c).sum()
}

fn distance(cost: f64, p: f64) -> f64 {
    cost.max(0.0).powf(1.0 / p)
}

/// Exact `W_p` for `m·n ≤ 64`.
///
/// Equal-size uniform clouds are matched exhaustively over permutations
/// (an optimal vertex of the Birkhoff polytope is a permutation). Other
/// weights go through min-cost flow, which also ends on a vertex.
pub fn exact_wr(a: &DiscreteCloud, b: &DiscreteCloud, p: f64) -> Result<(f64, TransportPlan)> {
    let (m, n) = (a.len(), b.len());
    if m * n > EXACT_MAX_CELLS {
        return Err(TransportError::TooLarge(m * n));
    }
    let c = cost_matrix(a, b, p)?;
    if !c.all_finite() {
        return Err(TransportError::NonFiniteCost);
    }
    let plan = if m == n && a.is_uniform() && b.is_uniform() {
        best_permutation(c.values(), n)
    } else {
        min_cost_flow(c.values(), a.weights(), b.weights())
    };
    // summing in sorted order makes W(a, b) and W(b, a) bit-identical
    let mut terms: Vec<f64> = plan.iter().zip(c.values()).map(|(g, c)| g * c).collect();
    terms.sort_by(f64::total_cmp);
    let cost = terms.iter().sum();
    Ok((
        distance(cost, p),
        TransportPlan {
            coupling: Tensor::from_vec(vec![m, n], plan)?,
            cost,
            converged: true,
            iterations: 0,
        },
    ))
}

fn best_permutation(c: &[f64], n: usize) -> Vec<f64> {
    // Heap's algorithm
    let mut perm: Vec<usize> = (0..n).collect();
    let score = |perm: &[usize]| {
        perm.iter()
            .enumerate()
            .map(|(i, &j)| c[i * n + j])
            .sum::<f64>()
    };
    let mut best = perm.clone();
    let mut best_score = score(&perm);
    let mut counters = vec![0usize; n];
    let mut i = 1;
    while i < n {
        if counters[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(counters[i], i);
            }
            let s = score(&perm);
            if s < best_score {
                best_score = s;
                best.copy_from_slice(&perm);
            }
            counters[i] += 1;
            i = 1;
        } else {
            counters[i] = 0;
            i += 1;
        }
    }
    let mut plan = vec![0.0; n * n];
    for (i, &j) in best.iter().enumerate() {
        plan[i * n + j] = 1.0 / n as f64;
    }
    plan
}

/// Successive shortest augmenting paths on the bipartite transport network
/// `source → i → j → sink`, with Bellman-Ford over the residual graph.
fn min_cost_flow(c: &[f64], a: &[f64], b: &[f64]) -> Vec<f64> {
    let (m, n) = (a.len(), b.len());
    let mut flow = vec![0.0; m * n];
    let mut supply = a.to_vec();
    let mut demand = b.to_vec();
    // node ids: 0..m sources, m..m+n targets
    let v = m + n;
    loop {
        let remaining: f64 = supply.iter().sum();
        if remaining <= 1e-15 {
            break;
        }
        let mut dist = vec![f64::INFINITY; v];
        let mut pred: Vec<Option<usize>> = vec![None; v];
        for i in 0..m {
            if supply[i] > 1e-15 {
                dist[i] = 0.0;
            }
        }
        for _ in 0..v {
            let mut changed = false;
            for i in 0..m {
                for j in 0..n {
                    let cost = c[i * n + j];
                    // forward arc i → j, unbounded capacity
                    if dist[i] + cost < dist[m + j] - 1e-15 {
                        dist[m + j] = dist[i] + cost;
                        pred[m + j] = Some(i);
                        changed = true;
                    }
                    // backward arc j → i where flow exists
                    if flow[i * n + j] > 1e-15 && dist[m + j] - cost < dist[i] - 1e-15 {
                        dist[i] = dist[m + j] - cost;
                        pred[i] = Some(m + j);
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        let Some(target) = (0..n)
            .filter(|&j| demand[j] > 1e-15)
            .min_by(|&x, &y| dist[m + x].total_cmp(&dist[m + y]))
        else {
            break;
        };
        if !dist[m + target].is_finite() {
            break;
        }
        // walk back to the source, collecting the path
        let mut path = vec![m + target];
        let mut node = m + target;
        while let Some(prev) = pred[node] {
            if node < m && supply[node] > 1e-15 && dist[node] == 0.0 {
                break;
            }
            path.push(prev);
            node = prev;
        }
        path.reverse();
        let start = path[0];
        let mut amount = supply[start].min(demand[target]);
        for w in path.windows(2) {
            if w[0] >= m {
                // backward arc target w[0] → source w[1]
                amount = amount.min(flow[w[1] * n + (w[0] - m)]);
            }
        }
        for w in path.windows(2) {
            if w[0] < m {
                flow[w[0] * n + (w[1] - m)] += amount;
            } else {
                flow[w[1] * n + (w[0] - m)] -= amount;
            }
        }
        supply[start] -= amount;
        demand[target] -= amount;
    }
    flow.iter_mut().for_each(|f| *f = f.max(0.0));
    flow
}

fn log_sum_exp(it: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = it.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + it.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Entropic `W_p` by log-domain Sinkhorn. The reported distance is the sharp
/// plan cost `⟨γ, C⟩^{1/p}`.
pub fn sinkhorn_wr(
    a: &DiscreteCloud,
    b: &DiscreteCloud,
    cfg: &SinkhornConfig,
) -> Result<(f64, TransportPlan)> {
    let (d, plan, _) = sinkhorn_traced(a, b, cfg)?;
    Ok((d, plan))
}

/// Per-sweep diagnostics of [`sinkhorn_traced`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SinkhornTrace {
    /// Sharp cost `⟨γ, C⟩` of the plan after each sweep. Not monotone in general.
    pub plan_cost: Vec<f64>,
    /// Entropic dual objective after each sweep; non-decreasing, since every
    /// half-sweep maximizes it exactly in one block of potentials.
    pub dual: Vec<f64>,
}

/// [`sinkhorn_wr`] that also records per-sweep diagnostics.
pub fn sinkhorn_traced(
    a: &DiscreteCloud,
    b: &DiscreteCloud,
    cfg: &SinkhornConfig,
) -> Result<(f64, TransportPlan, SinkhornTrace)> {
    cfg.validate()?;
    let c = cost_matrix(a, b, cfg.p)?;
    if !c.all_finite() {
        return Err(TransportError::NonFiniteCost);
    }
    let eps = cfg.epsilon_for(&c);
    let (m, n) = (a.len(), b.len());
    let cv = c.values();
    let log_a: Vec<f64> = a.weights().iter().map(|w| w.ln()).collect();
    let log_b: Vec<f64> = b.weights().iter().map(|w| w.ln()).collect();
    let mut f = vec![0.0; m];
    let mut g = vec![0.0; n];
    let mut plan = vec![0.0; m * n];
    let mut trace = SinkhornTrace::default();
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=cfg.max_iters {
        iterations = it;
        for i in 0..m {
            let row = &cv[i * n..(i + 1) * n];
            f[i] = eps * log_a[i] - eps * log_sum_exp((0..n).map(|j| (g[j] - row[j]) / eps));
        }
        for j in 0..n {
            g[j] = eps * log_b[j] - eps * log_sum_exp((0..m).map(|i| (f[i] - cv[i * n + j]) / eps));
        }
        let mut err = 0.0;
        let mut mass = 0.0;
        for i in 0..m {
            let mut row_sum = 0.0;
            for j in 0..n {
                let v = ((f[i] + g[j] - cv[i * n + j]) / eps).exp();
                plan[i * n + j] = v;
                row_sum += v;
            }
            mass += row_sum;
            err += (row_sum - a.weights()[i]).abs();
        }
        let linear: f64 = f.iter().zip(a.weights()).map(|(f, w)| f * w).sum::<f64>()
            + g.iter().zip(b.weights()).map(|(g, w)| g * w).sum::<f64>();
        trace.dual.push(linear - eps * mass + eps);
        trace.plan_cost.push(plan_cost(&plan, cv));
        if err <= cfg.tol {
            converged = true;
            break;
        }
    }
    let cost = plan_cost(&plan, cv);
    Ok((
        distance(cost, cfg.p),
        TransportPlan {
            coupling: Tensor::from_vec(vec![m, n], plan)?,
            cost,
            converged,
            iterations,
        },
        trace,
    ))
}

/// Settings of the per-class alignment loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WrLossConfig {
    pub sinkhorn: SinkhornConfig,
    pub sample_size: usize,
    pub seed: u64,
}

impl Default for WrLossConfig {
    fn default() -> Self {
        WrLossConfig {
            sinkhorn: SinkhornConfig::default(),
            sample_size: 128,
            seed: 0,
        }
    }
}

/// Up to `sample_size` nodes of `rows` labelled `class_id`, chosen by a
/// shuffle keyed on `(seed, epoch, class_id)`, returned sorted.
pub fn sample_class_nodes(
    labels: &[usize],
    rows: &[usize],
    class_id: usize,
    sample_size: usize,
    seed: u64,
    epoch: u64,
) -> Vec<usize> {
    let mut nodes: Vec<usize> = rows
        .iter()
        .copied()
        .filter(|&r| labels[r] == class_id)
        .collect();
    if nodes.len() > sample_size {
        let key = splitmix64(splitmix64(splitmix64(seed) ^ epoch) ^ class_id as u64);
        nodes.shuffle(&mut ChaCha8Rng::seed_from_u64(key));
        nodes.truncate(sample_size);
        nodes.sort_unstable();
    }
    nodes
}

/// Wasserstein distance between the two experts' embeddings of the sampled
/// training nodes of `class_id`, differentiable in both embeddings with the
/// Sinkhorn plan held fixed. Fewer than two sampled nodes give a zero
/// constant.
#[allow(clippy::too_many_arguments)]
pub fn class_wr_loss(
    tape: &mut Tape,
    gnn_embed: Var,
    gat_embed: Var,
    labels: &[usize],
    train_rows: &[usize],
    class_id: usize,
    cfg: &WrLossConfig,
    epoch: u64,
) -> Result<Var> {
    let (ge, ae) = (tape.value(gnn_embed), tape.value(gat_embed));
    if ge.rows() != ae.rows() {
        return Err(TransportError::InvalidCloud(format!(
            "embeddings cover {} and {} nodes",
            ge.rows(),
            ae.rows()
        )));
    }
    if ge.cols() != ae.cols() {
        return Err(TransportError::DimMismatch(ge.cols(), ae.cols()));
    }
    let nodes = sample_class_nodes(
        labels,
        train_rows,
        class_id,
        cfg.sample_size,
        cfg.seed,
        epoch,
    );
    if nodes.len() < 2 {
        log::warn!(
            "class {class_id}: {} sampled nodes, transport loss set to zero",
            nodes.len()
        );
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let x = tape.gather_rows(gnn_embed, &nodes)?;
    let y = tape.gather_rows(gat_embed, &nodes)?;
    let a = DiscreteCloud::uniform(tape.value(x).clone())?;
    let b = DiscreteCloud::uniform(tape.value(y).clone())?;
    let (_, plan) = sinkhorn_wr(&a, &b, &cfg.sinkhorn)?;
    if !plan.converged {
        log::debug!(
            "class {class_id}: sinkhorn stopped after {} sweeps unconverged",
            plan.iterations
        );
    }
    Ok(tape.plan_cost(x, y, plan.coupling.values(), cfg.sinkhorn.p)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::random_tensor;

    fn cloud(rows: &[Vec<f64>]) -> DiscreteCloud {
        DiscreteCloud::uniform(Tensor::from_rows(rows)).unwrap()
    }

    #[test]
    fn cost_matrix_examples() {
        let a = cloud(&[vec![0.0]]);
        let b = cloud(&[vec![3.0]]);
        assert_eq!(cost_matrix(&a, &a, 2.0).unwrap().values(), &[0.0]);
        assert_eq!(cost_matrix(&a, &b, 2.0).unwrap().values(), &[9.0]);
        let r = DiscreteCloud::uniform(random_tensor(&[6, 3], 1)).unwrap();
        let c = cost_matrix(&r, &r, 2.0).unwrap();
        for i in 0..6 {
            assert_eq!(c.get(i, i), 0.0);
            for j in 0..6 {
                assert_eq!(c.get(i, j), c.get(j, i));
            }
        }
        let d = cloud(&[vec![0.0, 1.0]]);
        assert!(matches!(
            cost_matrix(&a, &d, 2.0),
            Err(TransportError::DimMismatch(1, 2))
        ));
    }

    #[test]
    fn cloud_weights_validated() {
        let pts = Tensor::from_rows(&[vec![0.0], vec![1.0]]);
        assert!(DiscreteCloud::new(pts.clone(), vec![0.5, 0.6]).is_err());
        assert!(DiscreteCloud::new(pts.clone(), vec![1.5, -0.5]).is_err());
        assert!(DiscreteCloud::new(pts, vec![0.25, 0.75]).is_ok());
    }

    #[test]
    fn exact_examples() {
        let a = cloud(&[vec![0.0], vec![1.0]]);
        let b = cloud(&[vec![1.0], vec![2.0]]);
        let (d, plan) = exact_wr(&a, &b, 1.0).unwrap();
        assert!((d - 1.0).abs() < 1e-12);
        assert_eq!(plan.coupling.values(), &[0.5, 0.0, 0.0, 0.5]);
        assert_eq!(exact_wr(&a, &a, 2.0).unwrap().0, 0.0);
        for p in [1.0, 2.0, 3.0] {
            let s = cloud(&[vec![0.0, 0.0]]);
            let t = cloud(&[vec![3.0, 4.0]]);
            assert!((exact_wr(&s, &t, p).unwrap().0 - 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_size_cap() {
        let a = DiscreteCloud::uniform(random_tensor(&[9, 2], 1)).unwrap();
        let b = DiscreteCloud::uniform(random_tensor(&[8, 2], 2)).unwrap();
        assert!(matches!(
            exact_wr(&a, &b, 2.0),
            Err(TransportError::TooLarge(72))
        ));
    }

    #[test]
    fn flow_matches_permutation_on_uniform_clouds() {
        for seed in 0..20 {
            let a = DiscreteCloud::uniform(random_tensor(&[6, 3], seed)).unwrap();
            let b = DiscreteCloud::uniform(random_tensor(&[6, 3], seed + 100)).unwrap();
            let c = cost_matrix(&a, &b, 2.0).unwrap();
            let perm = plan_cost(&best_permutation(c.values(), 6), c.values());
            let flow = plan_cost(
                &min_cost_flow(c.values(), a.weights(), b.weights()),
                c.values(),
            );
            assert!((perm - flow).abs() < 1e-12, "seed {seed}: {perm} vs {flow}");
        }
    }

    #[test]
    fn flow_respects_general_marginals() {
        let a = DiscreteCloud::new(
            Tensor::from_rows(&[vec![0.0], vec![1.0], vec![5.0]]),
            vec![0.2, 0.5, 0.3],
        )
        .unwrap();
        let b =
            DiscreteCloud::new(Tensor::from_rows(&[vec![0.5], vec![4.0]]), vec![0.6, 0.4]).unwrap();
        let (_, plan) = exact_wr(&a, &b, 1.0).unwrap();
        let g = &plan.coupling;
        for i in 0..3 {
            assert!((g.row(i).iter().sum::<f64>() - a.weights()[i]).abs() < 1e-12);
        }
        for j in 0..2 {
            assert!(((0..3).map(|i| g.get(i, j)).sum::<f64>() - b.weights()[j]).abs() < 1e-12);
        }
        // hand solution: 0.2 and 0.4 of the mass near 0.5, the rest to 4
        assert!((plan.cost - (0.2 * 0.5 + 0.4 * 0.5 + 0.1 * 3.0 + 0.3 * 1.0)).abs() < 1e-12);
    }

    #[test]
    fn sinkhorn_examples() {
        let s = cloud(&[vec![1.0, 2.0]]);
        let t = cloud(&[vec![-1.0, 0.5]]);
        for eps in [1e-3, 1.0, 100.0] {
            let cfg = SinkhornConfig {
                epsilon: Some(eps),
                ..SinkhornConfig::default()
            };
            let (_, plan) = sinkhorn_wr(&s, &t, &cfg).unwrap();
            assert!((plan.coupling.values()[0] - 1.0).abs() < 1e-12);
        }
        let pts = random_tensor(&[6, 2], 3);
        let scale = pts.values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let a = DiscreteCloud::uniform(pts).unwrap();
        let cfg = SinkhornConfig {
            epsilon: Some(0.01),
            max_iters: 2000,
            ..SinkhornConfig::default()
        };
        let (d, _) = sinkhorn_wr(&a, &a, &cfg).unwrap();
        assert!(d < 0.05 * scale, "{d}");
    }

    #[test]
    fn sinkhorn_marginals_after_convergence() {
        let a = DiscreteCloud::uniform(random_tensor(&[7, 3], 5)).unwrap();
        let b = DiscreteCloud::uniform(random_tensor(&[5, 3], 6)).unwrap();
        let cfg = SinkhornConfig {
            max_iters: 5000,
            ..SinkhornConfig::default()
        };
        let (_, plan) = sinkhorn_wr(&a, &b, &cfg).unwrap();
        assert!(plan.converged);
        let g = &plan.coupling;
        let row_err: f64 = (0..7)
            .map(|i| (g.row(i).iter().sum::<f64>() - 1.0 / 7.0).abs())
            .sum();
        assert!(row_err <= cfg.tol);
        for j in 0..5 {
            assert!(((0..7).map(|i| g.get(i, j)).sum::<f64>() - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn sinkhorn_close_to_exact_at_small_epsilon() {
        for seed in 0..10 {
            let a = DiscreteCloud::uniform(random_tensor(&[5, 3], seed)).unwrap();
            let b = DiscreteCloud::uniform(random_tensor(&[5, 3], seed + 50)).unwrap();
            let (exact, _) = exact_wr(&a, &b, 2.0).unwrap();
            let cfg = SinkhornConfig {
                epsilon_scale: 0.005,
                max_iters: 20_000,
                ..SinkhornConfig::default()
            };
            let (approx, _) = sinkhorn_wr(&a, &b, &cfg).unwrap();
            assert!(
                (approx - exact).abs() / exact < 0.02,
                "seed {seed}: {approx} vs {exact}"
            );
        }
    }

    #[test]
    fn non_finite_cost_rejected() {
        let a = cloud(&[vec![f64::MAX]]);
        let b = cloud(&[vec![-f64::MAX]]);
        assert!(matches!(
            sinkhorn_wr(&a, &b, &SinkhornConfig::default()),
            Err(TransportError::NonFiniteCost)
        ));
    }

    #[test]
    fn sampling_is_deterministic_and_bounded() {
        let labels: Vec<usize> = (0..500).map(|i| i % 3).collect();
        let rows: Vec<usize> = (0..500).collect();
        let s1 = sample_class_nodes(&labels, &rows, 2, 50, 9, 4);
        let s2 = sample_class_nodes(&labels, &rows, 2, 50, 9, 4);
        let s3 = sample_class_nodes(&labels, &rows, 2, 50, 9, 5);
        assert_eq!(s1, s2);
        assert_ne!(s1, s3);
        assert_eq!(s1.len(), 50);
        assert!(s1.iter().all(|&r| labels[r] == 2));
    }

    #[test]
    fn class_loss_cases() {
        let emb = random_tensor(&[12, 3], 4);
        let labels: Vec<usize> = (0..12).map(|i| i % 2).collect();
        let rows: Vec<usize> = (0..12).collect();
        let cfg = WrLossConfig::default();

        // identical embeddings: only the entropic blur at ε = 0.01 remains
        let mut tape = Tape::new();
        let x = tape.leaf(emb.clone());
        let y = tape.leaf(emb.clone());
        let sharp = WrLossConfig {
            sinkhorn: SinkhornConfig {
                epsilon: Some(0.01),
                max_iters: 2000,
                ..SinkhornConfig::default()
            },
            ..cfg.clone()
        };
        let loss = class_wr_loss(&mut tape, x, y, &labels, &rows, 0, &sharp, 0).unwrap();
        let scale = emb.values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(tape.value(loss).values()[0] < 0.05 * scale);

        // translation by v: loss tends to ‖v‖
        let v = [0.3, -0.4, 1.2];
        let shifted: Vec<f64> = emb
            .values()
            .iter()
            .enumerate()
            .map(|(k, e)| e + v[k % 3])
            .collect();
        let shifted = Tensor::from_vec(vec![12, 3], shifted).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(emb.clone());
        let y = tape.leaf(shifted.clone());
        let tight = WrLossConfig {
            sinkhorn: SinkhornConfig {
                epsilon_scale: 0.001,
                max_iters: 20_000,
                ..SinkhornConfig::default()
            },
            ..cfg.clone()
        };
        let loss = class_wr_loss(&mut tape, x, y, &labels, &rows, 1, &tight, 0).unwrap();
        let norm_v = (v.iter().map(|a| a * a).sum::<f64>()).sqrt();
        let nodes = sample_class_nodes(&labels, &rows, 1, 128, 0, 0);
        let (exact, _) = exact_wr(
            &DiscreteCloud::uniform(emb.select_rows(&nodes)).unwrap(),
            &DiscreteCloud::uniform(shifted.select_rows(&nodes)).unwrap(),
            2.0,
        )
        .unwrap();
        assert!((exact - norm_v).abs() < 1e-9);
        assert!((tape.value(loss).values()[0] - norm_v).abs() < 0.02 * norm_v);

        // a class with one node gives a constant zero
        let lonely = vec![0; 11].into_iter().chain([1]).collect::<Vec<_>>();
        let mut tape = Tape::new();
        let x = tape.leaf(emb.clone());
        let y = tape.leaf(emb);
        let loss = class_wr_loss(&mut tape, x, y, &lonely, &rows, 1, &cfg, 0).unwrap();
        assert_eq!(tape.value(loss).values(), &[0.0]);
    }

    #[test]
    fn descent_step_shrinks_loss() {
        let x0 = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0]]);
        let y0 = Tensor::from_rows(&[vec![0.5, 2.0], vec![1.5, 2.5]]);
        let labels = vec![0, 0];
        let rows = vec![0, 1];
        let cfg = WrLossConfig::default();
        let eval = |x: &Tensor| {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let yv = tape.constant(y0.clone());
            let loss = class_wr_loss(&mut tape, xv, yv, &labels, &rows, 0, &cfg, 0).unwrap();
            tape.backward(loss).unwrap();
            (tape.value(loss).values()[0], tape.grad(xv).unwrap())
        };
        let (before, grad) = eval(&x0);
        let stepped: Vec<f64> = x0
            .values()
            .iter()
            .zip(grad.values())
            .map(|(x, g)| x - 0.1 * g)
            .collect();
        let (after, _) = eval(&Tensor::from_vec(vec![2, 2], stepped).unwrap());
        assert!(after < before, "{after} >= {before}");
    }
}
