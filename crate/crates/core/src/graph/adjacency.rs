use std::sync::Arc;

use rayon::prelude::*;

use super::{GraphError, Result};
use crate::sparse::SparseMatrix;

/// Undirected neighbor lists (sorted, deduplicated, no self-loops).
pub(crate) fn neighbor_lists(edges: &[(usize, usize)], num_nodes: usize) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); num_nodes];
    for &(a, b) in edges {
        if a != b {
            adj[a].push(b);
            adj[b].push(a);
        }
    }
    for list in &mut adj {
        list.sort_unstable();
        list.dedup();
    }
    adj
}

/// Symmetric normalization `D^{-1/2} (P + I) D^{-1/2}` of a per-row pattern,
/// where `D` counts the entries of each row including the self-loop.
fn normalize_pattern(rows: &[Vec<usize>], num_nodes: usize) -> SparseMatrix {
    let deg: Vec<f64> = rows.iter().map(|r| r.len() as f64 + 1.0).collect();
    let out = rows
        .iter()
        .enumerate()
        .map(|(i, nbrs)| {
            let mut row: Vec<(usize, f64)> = nbrs
                .iter()
                .map(|&j| (j, 1.0 / (deg[i] * deg[j]).sqrt()))
                .collect();
            row.push((i, 1.0 / deg[i]));
            row.sort_unstable_by_key(|&(j, _)| j);
            row
        })
        .collect();
    SparseMatrix::from_sorted_rows(num_nodes, out)
}

/// GCN propagation operator `D̃^{-1/2}(A + I)D̃^{-1/2}` for an undirected graph.
pub fn normalize_adjacency(edges: &[(usize, usize)], num_nodes: usize) -> SparseMatrix {
    normalize_pattern(&neighbor_lists(edges, num_nodes), num_nodes)
}

/// Exactly-k-hop propagation operators for k = 1..=K.
#[derive(Debug, Clone)]
pub struct HopSet {
    hops: Vec<Arc<SparseMatrix>>,
    empty: Vec<bool>,
}

impl HopSet {
    pub fn num_hops(&self) -> usize {
        self.hops.len()
    }

    /// Operator for hop `k` (1-based).
    pub fn hop(&self, k: usize) -> &Arc<SparseMatrix> {
        &self.hops[k - 1]
    }

    pub fn hops(&self) -> &[Arc<SparseMatrix>] {
        &self.hops
    }

    /// True when hop `k` has no node pairs at that distance (only self-loops).
    pub fn is_empty_hop(&self, k: usize) -> bool {
        self.empty[k - 1]
    }
}

/// Builds exactly-k-hop operators by breadth-first search.
///
/// Hop 1 is the full normalized adjacency. For k ≥ 2 each row keeps at most
/// `max_neighbors_per_hop` nodes at distance exactly k, choosing the lowest
/// ids, and every hop matrix carries self-loops and is normalized on its own.
pub fn build_hopset(
    edges: &[(usize, usize)],
    num_nodes: usize,
    max_hops: usize,
    max_neighbors_per_hop: usize,
) -> Result<HopSet> {
    if max_hops == 0 {
        return Err(GraphError::Config("hop count K must be at least 1".into()));
    }
    let adj = neighbor_lists(edges, num_nodes);
    // per source: nodes at distance k for k = 2..=K
    let rings: Vec<Vec<Vec<usize>>> = (0..num_nodes)
        .into_par_iter()
        .map(|src| bfs_rings(&adj, src, max_hops, max_neighbors_per_hop))
        .collect();

    let mut hops = vec![Arc::new(normalize_pattern(&adj, num_nodes))];
    let mut empty = vec![adj.iter().all(Vec::is_empty)];
    for k in 2..=max_hops {
        let rows: Vec<Vec<usize>> = rings.iter().map(|r| r[k - 2].clone()).collect();
        let is_empty = rows.iter().all(Vec::is_empty);
        if is_empty {
            log::warn!("hop {k} has no node pairs at that distance; it will contribute zeros");
        }
        hops.push(Arc::new(normalize_pattern(&rows, num_nodes)));
        empty.push(is_empty);
    }
    Ok(HopSet { hops, empty })
}

fn bfs_rings(adj: &[Vec<usize>], src: usize, max_hops: usize, cap: usize) -> Vec<Vec<usize>> {
    let mut dist: std::collections::HashMap<usize, usize> = std::collections::HashMap::new();
    dist.insert(src, 0);
    let mut frontier = vec![src];
    let mut rings = Vec::with_capacity(max_hops.saturating_sub(1));
    for k in 1..=max_hops {
        let mut next = Vec::new();
        for &u in &frontier {
            for &v in &adj[u] {
                if let std::collections::hash_map::Entry::Vacant(e) = dist.entry(v) {
                    e.insert(k);
                    next.push(v);
                }
            }
        }
        next.sort_unstable();
        if k >= 2 {
            let mut ring = next.clone();
            ring.truncate(cap);
            rings.push(ring);
        }
        frontier = next;
    }
    rings
}
