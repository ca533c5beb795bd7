//! Graph neural network experts for node classification and their
//! optimal-transport guided fusion.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense tensors and a reverse-mode differentiation tape.
//! - [`sparse`]: CSR matrices used as propagation operators.
//! - [`graph`]: datasets, normalized adjacency, k-hop structure, synthetic
//!   block-model graphs and the bundle file format.
//! - [`models`]: GCN, residual/layer-normalized GNN and multi-hop GAT.
//! - [`train`]: Adam, early stopping, metrics and embedding export.
//! - [`transport`]: exact and entropic Wasserstein distances.
//! - [`fusion`]: fixed, confidence-adaptive and transport-guided fusion.
//! - [`checkpoint`]: model and fusion-policy checkpoints.
//! - [`cli`]: the `grafuse` command line.

pub mod checkpoint;
pub mod cli;
pub mod fusion;
pub mod graph;
pub mod models;
pub mod sparse;
pub mod tensor;
pub mod train;
pub mod transport;

#[cfg(test)]
pub(crate) mod testutil;
