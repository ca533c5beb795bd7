//! Dense tensors and a reverse-mode differentiation tape.
//!
//! Values are row-major `f64` buffers. Computation is recorded on a [`Tape`]
//! as it runs: every operation appends a node whose inputs were appended
//! earlier, so node order is already a topological order and
//! [`Tape::backward`] is a single reverse sweep.
//!
//! Broadcasting is deliberately narrow: binary elementwise operations accept
//! either two operands of identical shape or one operand with a single
//! element. Layer normalization applies its per-column gain and bias
//! internally.
//!
//! ```
//! use grafuse::tensor::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::from_vec(vec![1, 2], vec![1.0, 2.0]).unwrap());
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap().values(), &[2.0, 4.0]);
//! ```

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::sparse::SparseMatrix;

/// Products smaller than this many multiply-adds stay on the calling thread.
const PAR_THRESHOLD: usize = 1 << 15;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: domain error: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("row {row} has no unmasked entries")]
    DegenerateRow { row: usize },
    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// A dense row-major array of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(TensorError::Shape {
                op: "from_vec",
                lhs: shape,
                rhs: vec![values.len()],
            });
        }
        Ok(Tensor { shape, values })
    }

    /// Builds a matrix from rows. Panics on ragged input.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Tensor {
            shape: vec![rows.len(), cols],
            values: rows.iter().flatten().copied().collect(),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            values: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            values: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1, 1],
            values: vec![value],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.values[i * n + i] = 1.0;
        }
        t
    }

    /// Glorot/Xavier uniform initialization for a `fan_in × fan_out` matrix.
    pub fn glorot_uniform<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let values = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-limit..=limit))
            .collect();
        Tensor {
            shape: vec![fan_in, fan_out],
            values,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Rows of the tensor viewed as a matrix; 1-D tensors are a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols() + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let c = self.cols();
        &self.values[row * c..(row + 1) * c]
    }

    /// Returns the single element of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.values.len() == 1).then(|| self.values[0])
    }

    pub fn transpose(&self) -> Tensor {
        let (m, n) = (self.rows(), self.cols());
        Tensor {
            shape: vec![n, m],
            values: transpose_buf(&self.values, m, n),
        }
    }

    /// Selects the given rows, in order.
    pub fn select_rows(&self, rows: &[usize]) -> Tensor {
        let c = self.cols();
        let mut values = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            values.extend_from_slice(self.row(r));
        }
        Tensor {
            shape: vec![rows.len(), c],
            values,
        }
    }

    /// Index of the largest entry of each row; the first wins on ties.
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.rows())
            .map(|r| {
                let row = self.row(r);
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    fn matrix_dims(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(TensorError::Shape {
                op,
                lhs: self.shape.clone(),
                rhs: vec![],
            });
        }
        Ok((self.shape[0], self.shape[1]))
    }
}

pub(crate) fn transpose_buf(values: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = values[i * n + j];
        }
    }
    out
}

/// `a (m×k) · b (k×n)`; rows are computed independently so the result does
/// not depend on the thread count.
pub(crate) fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    if n == 0 {
        return out;
    }
    let kernel = |(i, row): (usize, &mut [f64])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(kernel);
    } else {
        out.chunks_mut(n).enumerate().for_each(kernel);
    }
    out
}

/// Key of the counter-based dropout stream. Masks depend only on the key, so
/// the same layer in the same epoch always drops the same entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DropoutKey {
    pub seed: u64,
    pub epoch: u64,
    pub layer: u64,
}

impl DropoutKey {
    pub fn new(seed: u64, epoch: u64, layer: u64) -> Self {
        DropoutKey { seed, epoch, layer }
    }

    fn stream_seed(&self) -> u64 {
        let mut h = splitmix64(self.seed ^ 0x5851_f42d_4c95_7f2d);
        h = splitmix64(h ^ self.epoch);
        splitmix64(h ^ self.layer.wrapping_mul(0x9e37_79b9_7f4a_7c15))
    }
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    LhsScalar,
    RhsScalar,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var, Broadcast),
    Sub(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Scale(Var, f64),
    Relu(Var),
    LeakyRelu(Var, f64),
    Exp(Var),
    Log(Var),
    Dropout(Var, Vec<f64>),
    RowSoftmax(Var),
    LogSoftmax(Var),
    RowNormalize(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SpMM(Arc<SparseMatrix>, Var),
    EdgeScores {
        pattern: Arc<SparseMatrix>,
        src: Var,
        dst: Var,
    },
    EdgeSoftmax(Arc<SparseMatrix>, Var),
    EdgeSpMM {
        pattern: Arc<SparseMatrix>,
        alpha: Var,
        x: Var,
    },
    ConcatCols(Vec<Var>),
    Select(Var, usize),
    Sum(Var),
    GatherRows(Var, Vec<usize>),
    MaskedNll {
        logp: Var,
        rows: Vec<usize>,
        labels: Vec<usize>,
        weights: Vec<f64>,
        total: f64,
    },
    PlanCost {
        x: Var,
        y: Var,
        plan: Vec<f64>,
        p: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Records operations for reverse-mode differentiation.
///
/// Gradients of leaves accumulate across calls to [`Tape::backward`]; call
/// [`Tape::zero_grad`] between independent passes.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable input (parameter).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Arc::new(value), true, Op::Leaf)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Arc::new(value), false, Op::Leaf)
    }

    /// A non-differentiable input shared without copying.
    pub fn constant_arc(&mut self, value: Arc<Tensor>) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.leaf_grads.get(v.0)?.as_ref().map(|g| Tensor {
            shape: self.nodes[v.0].value.shape.clone(),
            values: g.clone(),
        })
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn push(&mut self, value: Arc<Tensor>, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, inputs: &[Var], op: Op) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Arc::new(value), rg, op)
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.val(a).matrix_dims("matmul")?;
        let (k2, n) = self.val(b).matrix_dims("matmul")?;
        if k != k2 {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: self.val(a).shape.clone(),
                rhs: self.val(b).shape.clone(),
            });
        }
        let values = gemm(&self.val(a).values, &self.val(b).values, m, k, n);
        let out = Tensor {
            shape: vec![m, n],
            values,
        };
        Ok(self.push_op(out, &[a, b], Op::MatMul(a, b)))
    }

    fn broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<Broadcast> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.shape == tb.shape {
            Ok(Broadcast::Same)
        } else if ta.len() == 1 {
            Ok(Broadcast::LhsScalar)
        } else if tb.len() == 1 {
            Ok(Broadcast::RhsScalar)
        } else {
            Err(TensorError::Shape {
                op,
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            })
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(Var, Var, Broadcast) -> Op,
    ) -> Result<Var> {
        let bc = self.broadcast(name, a, b)?;
        let (ta, tb) = (self.val(a), self.val(b));
        let out = match bc {
            Broadcast::Same => Tensor {
                shape: ta.shape.clone(),
                values: ta
                    .values
                    .iter()
                    .zip(&tb.values)
                    .map(|(&x, &y)| f(x, y))
                    .collect(),
            },
            Broadcast::LhsScalar => {
                let s = ta.values[0];
                Tensor {
                    shape: tb.shape.clone(),
                    values: tb.values.iter().map(|&y| f(s, y)).collect(),
                }
            }
            Broadcast::RhsScalar => {
                let s = tb.values[0];
                Tensor {
                    shape: ta.shape.clone(),
                    values: ta.values.iter().map(|&x| f(x, s)).collect(),
                }
            }
        };
        Ok(self.push_op(out, &[a, b], op(a, b, bc)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let t = self.val(a);
        let out = Tensor {
            shape: t.shape.clone(),
            values: t.values.iter().map(|v| v * factor).collect(),
        };
        self.push_op(out, &[a], Op::Scale(a, factor))
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.val(a);
        Tensor {
            shape: t.shape.clone(),
            values: t.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.map(a, |v| v.max(0.0));
        self.push_op(out, &[a], Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let out = self.map(a, |v| if v > 0.0 { v } else { slope * v });
        self.push_op(out, &[a], Op::LeakyRelu(a, slope))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.map(a, f64::exp);
        self.push_op(out, &[a], Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.val(a).values.iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(TensorError::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        let out = self.map(a, f64::ln);
        Ok(self.push_op(out, &[a], Op::Log(a)))
    }

    /// Inverted dropout. In eval mode (`train == false`) this is the identity
    /// and records nothing.
    pub fn dropout(&mut self, a: Var, rate: f64, train: bool, key: DropoutKey) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::Config(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        if !train || rate == 0.0 {
            return Ok(a);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(key.stream_seed());
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.val(a).len())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        let t = self.val(a);
        let out = Tensor {
            shape: t.shape.clone(),
            values: t.values.iter().zip(&mask).map(|(v, m)| v * m).collect(),
        };
        Ok(self.push_op(out, &[a], Op::Dropout(a, mask)))
    }

    /// Softmax over each row. Masked (`false`) entries are exactly zero and
    /// every row must keep at least one entry.
    pub fn row_softmax(&mut self, scores: Var, mask: Option<&[bool]>) -> Result<Var> {
        let t = self.val(scores);
        let (m, n) = (t.rows(), t.cols());
        if let Some(mask) = mask {
            if mask.len() != t.len() {
                return Err(TensorError::Shape {
                    op: "row_softmax",
                    lhs: t.shape.clone(),
                    rhs: vec![mask.len()],
                });
            }
        }
        let mut values = vec![0.0; m * n];
        for i in 0..m {
            let keep = |j: usize| mask.is_none_or(|mk| mk[i * n + j]);
            let row = t.row(i);
            let max = (0..n)
                .filter(|&j| keep(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(TensorError::DegenerateRow { row: i });
            }
            let out = &mut values[i * n..(i + 1) * n];
            let mut z = 0.0;
            for j in (0..n).filter(|&j| keep(j)) {
                out[j] = (row[j] - max).exp();
                z += out[j];
            }
            out.iter_mut().for_each(|v| *v /= z);
        }
        let out = Tensor {
            shape: t.shape.clone(),
            values,
        };
        Ok(self.push_op(out, &[scores], Op::RowSoftmax(scores)))
    }

    pub fn log_softmax(&mut self, logits: Var) -> Var {
        let t = self.val(logits);
        let n = t.cols();
        let mut values = t.values.clone();
        for row in values.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let out = Tensor {
            shape: t.shape.clone(),
            values,
        };
        self.push_op(out, &[logits], Op::LogSoftmax(logits))
    }

    /// Divides each row by its sum. Rows must have a positive sum.
    pub fn row_normalize(&mut self, a: Var) -> Result<Var> {
        let t = self.val(a);
        let n = t.cols();
        let mut values = t.values.clone();
        for (i, row) in values.chunks_mut(n).enumerate() {
            let s: f64 = row.iter().sum();
            if s <= 0.0 || !s.is_finite() {
                return Err(TensorError::Domain {
                    op: "row_normalize",
                    detail: format!("row {i} sums to {s}"),
                });
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let out = Tensor {
            shape: t.shape.clone(),
            values,
        };
        Ok(self.push_op(out, &[a], Op::RowNormalize(a)))
    }

    /// Row-wise layer normalization with population variance, followed by a
    /// per-column affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let t = self.val(x);
        let (m, n) = (t.rows(), t.cols());
        if n == 0 {
            return Err(TensorError::Contract("layer_norm needs n >= 1".into()));
        }
        for p in [gain, bias] {
            if self.val(p).len() != n {
                return Err(TensorError::Shape {
                    op: "layer_norm",
                    lhs: t.shape.clone(),
                    rhs: self.val(p).shape.clone(),
                });
            }
        }
        let (g, b) = (&self.val(gain).values, &self.val(bias).values);
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut values = vec![0.0; m * n];
        for i in 0..m {
            let row = t.row(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[i] = inv;
            for j in 0..n {
                let h = (row[j] - mean) * inv;
                xhat[i * n + j] = h;
                values[i * n + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor {
            shape: t.shape.clone(),
            values,
        };
        Ok(self.push_op(
            out,
            &[x, gain, bias],
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Sparse-dense product `m · x`. The sparse operand is a constant.
    pub fn spmm(&mut self, m: &Arc<SparseMatrix>, x: Var) -> Result<Var> {
        let t = self.val(x);
        if m.ncols() != t.rows() || t.shape.len() != 2 {
            return Err(TensorError::Shape {
                op: "spmm",
                lhs: vec![m.nrows(), m.ncols()],
                rhs: t.shape.clone(),
            });
        }
        let values = m.mul_dense(&t.values, t.cols());
        let out = Tensor {
            shape: vec![m.nrows(), t.cols()],
            values,
        };
        Ok(self.push_op(out, &[x], Op::SpMM(Arc::clone(m), x)))
    }

    /// Per stored entry `(i, j)` of `pattern`: `src[i] + dst[j]`. Both inputs
    /// are `n × 1`; the output is `nnz × 1` in CSR order.
    pub fn edge_scores(&mut self, pattern: &Arc<SparseMatrix>, src: Var, dst: Var) -> Result<Var> {
        let (ts, td) = (self.val(src), self.val(dst));
        if ts.len() != pattern.nrows() || td.len() != pattern.ncols() {
            return Err(TensorError::Shape {
                op: "edge_scores",
                lhs: vec![pattern.nrows(), pattern.ncols()],
                rhs: vec![ts.len(), td.len()],
            });
        }
        let mut values = Vec::with_capacity(pattern.nnz());
        for i in 0..pattern.nrows() {
            for &j in pattern.row_indices(i) {
                values.push(ts.values[i] + td.values[j]);
            }
        }
        let out = Tensor {
            shape: vec![pattern.nnz(), 1],
            values,
        };
        Ok(self.push_op(
            out,
            &[src, dst],
            Op::EdgeScores {
                pattern: Arc::clone(pattern),
                src,
                dst,
            },
        ))
    }

    /// Softmax of per-entry scores within each row of `pattern`.
    pub fn edge_softmax(&mut self, pattern: &Arc<SparseMatrix>, scores: Var) -> Result<Var> {
        let t = self.val(scores);
        if t.len() != pattern.nnz() {
            return Err(TensorError::Shape {
                op: "edge_softmax",
                lhs: vec![pattern.nnz()],
                rhs: t.shape.clone(),
            });
        }
        let mut values = vec![0.0; t.len()];
        for i in 0..pattern.nrows() {
            let range = pattern.row_range(i);
            if range.is_empty() {
                return Err(TensorError::DegenerateRow { row: i });
            }
            let seg = &t.values[range.clone()];
            let max = seg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let out = &mut values[range];
            let mut z = 0.0;
            for (o, &s) in out.iter_mut().zip(seg) {
                *o = (s - max).exp();
                z += *o;
            }
            out.iter_mut().for_each(|v| *v /= z);
        }
        let out = Tensor {
            shape: t.shape.clone(),
            values,
        };
        Ok(self.push_op(out, &[scores], Op::EdgeSoftmax(Arc::clone(pattern), scores)))
    }

    /// `out[i] = Σ_{(i,j) ∈ pattern} alpha_ij · x[j]` with per-entry weights.
    pub fn edge_spmm(&mut self, pattern: &Arc<SparseMatrix>, alpha: Var, x: Var) -> Result<Var> {
        let (ta, tx) = (self.val(alpha), self.val(x));
        if ta.len() != pattern.nnz() || tx.rows() != pattern.ncols() || tx.shape.len() != 2 {
            return Err(TensorError::Shape {
                op: "edge_spmm",
                lhs: vec![pattern.nnz(), pattern.ncols()],
                rhs: tx.shape.clone(),
            });
        }
        let d = tx.cols();
        let weighted = pattern.with_values(ta.values.clone());
        let values = weighted.mul_dense(&tx.values, d);
        let out = Tensor {
            shape: vec![pattern.nrows(), d],
            values,
        };
        Ok(self.push_op(
            out,
            &[alpha, x],
            Op::EdgeSpMM {
                pattern: Arc::clone(pattern),
                alpha,
                x,
            },
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat_cols of nothing".into()))?;
        let m = self.val(*first).rows();
        for p in parts {
            if self.val(*p).rows() != m || self.val(*p).shape.len() != 2 {
                return Err(TensorError::Shape {
                    op: "concat_cols",
                    lhs: self.val(*first).shape.clone(),
                    rhs: self.val(*p).shape.clone(),
                });
            }
        }
        let total: usize = parts.iter().map(|p| self.val(*p).cols()).sum();
        let mut values = Vec::with_capacity(m * total);
        for i in 0..m {
            for p in parts {
                values.extend_from_slice(self.val(*p).row(i));
            }
        }
        let out = Tensor {
            shape: vec![m, total],
            values,
        };
        Ok(self.push_op(out, parts, Op::ConcatCols(parts.to_vec())))
    }

    /// Extracts element `index` (flat) as a `1 × 1` tensor.
    pub fn select(&mut self, a: Var, index: usize) -> Result<Var> {
        let t = self.val(a);
        let v = *t.values.get(index).ok_or_else(|| {
            TensorError::Contract(format!("select index {index} out of {}", t.len()))
        })?;
        Ok(self.push_op(Tensor::scalar(v), &[a], Op::Select(a, index)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.val(a).values.iter().sum();
        self.push_op(Tensor::scalar(s), &[a], Op::Sum(a))
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let t = self.val(a);
        if let Some(&bad) = rows.iter().find(|&&r| r >= t.rows()) {
            return Err(TensorError::Contract(format!(
                "gather_rows index {bad} out of {} rows",
                t.rows()
            )));
        }
        let out = t.select_rows(rows);
        Ok(self.push_op(out, &[a], Op::GatherRows(a, rows.to_vec())))
    }

    /// Weighted mean negative log-likelihood over `rows`, where `logp` holds
    /// log-probabilities. `class_weights` (if given) weighs each row by the
    /// weight of its label.
    pub fn masked_nll(
        &mut self,
        logp: Var,
        rows: &[usize],
        labels: &[usize],
        class_weights: Option<&[f64]>,
    ) -> Result<Var> {
        if rows.is_empty() {
            return Err(TensorError::Contract(
                "masked_nll over an empty row set".into(),
            ));
        }
        let t = self.val(logp);
        let c = t.cols();
        let mut loss = 0.0;
        let mut total = 0.0;
        let mut row_labels = Vec::with_capacity(rows.len());
        let mut weights = Vec::with_capacity(rows.len());
        for &r in rows {
            let y = labels[r];
            if y >= c || r >= t.rows() {
                return Err(TensorError::Contract(format!(
                    "label {y} / row {r} out of range"
                )));
            }
            let w = class_weights.map_or(1.0, |cw| cw[y]);
            loss -= w * t.values[r * c + y];
            total += w;
            row_labels.push(y);
            weights.push(w);
        }
        if total <= 0.0 {
            return Err(TensorError::Contract("class weights sum to zero".into()));
        }
        Ok(self.push_op(
            Tensor::scalar(loss / total),
            &[logp],
            Op::MaskedNll {
                logp,
                rows: rows.to_vec(),
                labels: row_labels,
                weights,
                total,
            },
        ))
    }

    /// `(Σ_ij plan_ij ‖x_i − y_j‖^p)^{1/p}` with the coupling held constant.
    pub fn plan_cost(&mut self, x: Var, y: Var, plan: &[f64], p: f64) -> Result<Var> {
        let (tx, ty) = (self.val(x), self.val(y));
        let (m, n) = (tx.rows(), ty.rows());
        if tx.cols() != ty.cols() || plan.len() != m * n {
            return Err(TensorError::Shape {
                op: "plan_cost",
                lhs: tx.shape.clone(),
                rhs: ty.shape.clone(),
            });
        }
        let mut s = 0.0;
        for i in 0..m {
            for j in 0..n {
                let w = plan[i * n + j];
                if w != 0.0 {
                    s += w * sq_dist(tx.row(i), ty.row(j)).sqrt().powf(p);
                }
            }
        }
        let out = Tensor::scalar(s.max(0.0).powf(1.0 / p));
        Ok(self.push_op(
            out,
            &[x, y],
            Op::PlanCost {
                x,
                y,
                plan: plan.to_vec(),
                p,
            },
        ))
    }

    /// Propagates gradients from the scalar `loss` to every differentiable
    /// leaf it depends on. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.val(loss).len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.val(loss).shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.leaf_grads[idx] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(g),
                }
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
            slot => *slot = Some(contrib),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => unreachable!(),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.wants(*a) {
                    let bt = transpose_buf(&tb.values, k, n);
                    self.accumulate(grads, *a, gemm(g, &bt, m, n, k));
                }
                if self.wants(*b) {
                    let at = transpose_buf(&ta.values, m, k);
                    self.accumulate(grads, *b, gemm(&at, g, k, m, n));
                }
            }
            Op::Add(a, b, bc) => {
                let (ga, gb) = split_broadcast(g, *bc, |_| 1.0, |_| 1.0);
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Sub(a, b, bc) => {
                let (ga, gb) = split_broadcast(g, *bc, |_| 1.0, |_| -1.0);
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Mul(a, b, bc) => {
                let (va, vb) = (&self.val(*a).values, &self.val(*b).values);
                let pick =
                    |vals: &Vec<f64>, k: usize| if vals.len() == 1 { vals[0] } else { vals[k] };
                let (ga, gb) = split_broadcast(g, *bc, |k| pick(vb, k), |k| pick(va, k));
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Scale(a, f) => self.accumulate(grads, *a, g.iter().map(|v| v * f).collect()),
            Op::Relu(a) => {
                let x = &self.val(*a).values;
                let ga = g
                    .iter()
                    .zip(x)
                    .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, ga);
            }
            Op::LeakyRelu(a, slope) => {
                let x = &self.val(*a).values;
                let ga = g
                    .iter()
                    .zip(x)
                    .map(|(&gv, &xv)| if xv > 0.0 { gv } else { slope * gv })
                    .collect();
                self.accumulate(grads, *a, ga);
            }
            Op::Exp(a) => {
                let ga = g.iter().zip(&out.values).map(|(gv, y)| gv * y).collect();
                self.accumulate(grads, *a, ga);
            }
            Op::Log(a) => {
                let x = &self.val(*a).values;
                let ga = g.iter().zip(x).map(|(gv, xv)| gv / xv).collect();
                self.accumulate(grads, *a, ga);
            }
            Op::Dropout(a, mask) => {
                let ga = g.iter().zip(mask).map(|(gv, m)| gv * m).collect();
                self.accumulate(grads, *a, ga);
            }
            Op::RowSoftmax(a) => {
                let n = out.cols();
                let mut ga = vec![0.0; g.len()];
                for ((gr, yr), dr) in g.chunks(n).zip(out.values.chunks(n)).zip(ga.chunks_mut(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((d, gv), y) in dr.iter_mut().zip(gr).zip(yr) {
                        *d = y * (gv - dot);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::LogSoftmax(a) => {
                let n = out.cols();
                let mut ga = vec![0.0; g.len()];
                for ((gr, yr), dr) in g.chunks(n).zip(out.values.chunks(n)).zip(ga.chunks_mut(n)) {
                    let gs: f64 = gr.iter().sum();
                    for ((d, gv), y) in dr.iter_mut().zip(gr).zip(yr) {
                        *d = gv - y.exp() * gs;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::RowNormalize(a) => {
                let x = self.val(*a);
                let n = x.cols();
                let mut ga = vec![0.0; g.len()];
                for i in 0..x.rows() {
                    let s: f64 = x.row(i).iter().sum();
                    let gr = &g[i * n..(i + 1) * n];
                    let yr = &out.values[i * n..(i + 1) * n];
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        ga[i * n + j] = (gr[j] - dot) / s;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = out.cols();
                let m = out.rows();
                let gv = &self.val(*gain).values;
                if self.wants(*gain) {
                    let mut gg = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            gg[j] += g[i * n + j] * xhat[i * n + j];
                        }
                    }
                    self.accumulate(grads, *gain, gg);
                }
                if self.wants(*bias) {
                    let mut gb = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            gb[j] += g[i * n + j];
                        }
                    }
                    self.accumulate(grads, *bias, gb);
                }
                if self.wants(*x) {
                    let mut gx = vec![0.0; m * n];
                    let nf = n as f64;
                    for i in 0..m {
                        let r = i * n..(i + 1) * n;
                        let dxhat: Vec<f64> =
                            g[r.clone()].iter().zip(gv).map(|(a, b)| a * b).collect();
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dx: f64 =
                            dxhat.iter().zip(&xhat[r.clone()]).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            gx[i * n + j] = inv_std[i] / nf
                                * (nf * dxhat[j] - sum_d - xhat[i * n + j] * sum_dx);
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::SpMM(m, x) => {
                let d = out.cols();
                self.accumulate(grads, *x, m.transpose().mul_dense(g, d));
            }
            Op::EdgeScores { pattern, src, dst } => {
                let mut gs = vec![0.0; pattern.nrows()];
                let mut gd = vec![0.0; pattern.ncols()];
                let mut k = 0;
                for (i, slot) in gs.iter_mut().enumerate() {
                    for &j in pattern.row_indices(i) {
                        *slot += g[k];
                        gd[j] += g[k];
                        k += 1;
                    }
                }
                self.accumulate(grads, *src, gs);
                self.accumulate(grads, *dst, gd);
            }
            Op::EdgeSoftmax(pattern, scores) => {
                let mut ga = vec![0.0; g.len()];
                for i in 0..pattern.nrows() {
                    let r = pattern.row_range(i);
                    let dot: f64 = g[r.clone()]
                        .iter()
                        .zip(&out.values[r.clone()])
                        .map(|(a, b)| a * b)
                        .sum();
                    for k in r {
                        ga[k] = out.values[k] * (g[k] - dot);
                    }
                }
                self.accumulate(grads, *scores, ga);
            }
            Op::EdgeSpMM { pattern, alpha, x } => {
                let tx = self.val(*x);
                let d = tx.cols();
                let va = &self.val(*alpha).values;
                if self.wants(*alpha) {
                    let mut galpha = vec![0.0; pattern.nnz()];
                    let mut k = 0;
                    for i in 0..pattern.nrows() {
                        let gi = &g[i * d..(i + 1) * d];
                        for &j in pattern.row_indices(i) {
                            galpha[k] = gi.iter().zip(tx.row(j)).map(|(a, b)| a * b).sum();
                            k += 1;
                        }
                    }
                    self.accumulate(grads, *alpha, galpha);
                }
                if self.wants(*x) {
                    let weighted = pattern.with_values(va.clone());
                    self.accumulate(grads, *x, weighted.transpose().mul_dense(g, d));
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for p in parts {
                    let c = self.val(*p).cols();
                    if self.wants(*p) {
                        let mut gp = Vec::with_capacity(out.rows() * c);
                        for i in 0..out.rows() {
                            gp.extend_from_slice(&g[i * total + offset..i * total + offset + c]);
                        }
                        self.accumulate(grads, *p, gp);
                    }
                    offset += c;
                }
            }
            Op::Select(a, index) => {
                let mut ga = vec![0.0; self.val(*a).len()];
                ga[*index] = g[0];
                self.accumulate(grads, *a, ga);
            }
            Op::Sum(a) => self.accumulate(grads, *a, vec![g[0]; self.val(*a).len()]),
            Op::GatherRows(a, rows) => {
                let ta = self.val(*a);
                let c = ta.cols();
                let mut ga = vec![0.0; ta.len()];
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..c {
                        ga[r * c + j] += g[k * c + j];
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::MaskedNll {
                logp,
                rows,
                labels,
                weights,
                total,
            } => {
                let t = self.val(*logp);
                let c = t.cols();
                let mut ga = vec![0.0; t.len()];
                for ((&r, &y), &w) in rows.iter().zip(labels).zip(weights) {
                    ga[r * c + y] -= g[0] * w / total;
                }
                self.accumulate(grads, *logp, ga);
            }
            Op::PlanCost { x, y, plan, p } => {
                let (tx, ty) = (self.val(*x), self.val(*y));
                let (m, n, d) = (tx.rows(), ty.rows(), tx.cols());
                let w = out.values[0];
                // d W / d S with S = W^p
                let outer = if w > 0.0 {
                    g[0] * w.powf(1.0 - p) / p
                } else {
                    0.0
                };
                let mut gx = vec![0.0; m * d];
                let mut gy = vec![0.0; n * d];
                for i in 0..m {
                    for j in 0..n {
                        let pij = plan[i * n + j];
                        if pij == 0.0 {
                            continue;
                        }
                        let dist = sq_dist(tx.row(i), ty.row(j)).sqrt();
                        if dist == 0.0 {
                            continue;
                        }
                        let coef = outer * pij * p * dist.powf(p - 2.0);
                        for k in 0..d {
                            let diff = tx.values[i * d + k] - ty.values[j * d + k];
                            gx[i * d + k] += coef * diff;
                            gy[j * d + k] -= coef * diff;
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *y, gy);
            }
        }
    }
}

fn split_broadcast(
    g: &[f64],
    bc: Broadcast,
    da: impl Fn(usize) -> f64,
    db: impl Fn(usize) -> f64,
) -> (Vec<f64>, Vec<f64>) {
    let ga: Vec<f64> = g.iter().enumerate().map(|(k, v)| v * da(k)).collect();
    let gb: Vec<f64> = g.iter().enumerate().map(|(k, v)| v * db(k)).collect();
    match bc {
        Broadcast::Same => (ga, gb),
        Broadcast::LhsScalar => (vec![ga.iter().sum()], gb),
        Broadcast::RhsScalar => (ga, vec![gb.iter().sum()]),
    }
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{check_gradients, random_tensor};

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows)
    }

    #[test]
    fn identity_matmul_is_noop() {
        let mut tape = Tape::new();
        let x = t(&[vec![1.0, -2.0, 3.0], vec![0.5, 4.0, -1.0]]);
        let i = tape.constant(Tensor::identity(2));
        let xv = tape.constant(x.clone());
        let y = tape.matmul(i, xv).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn matmul_small_by_hand() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let b = tape.constant(t(&[vec![1.0], vec![1.0]]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).values(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::Shape {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        for seed in 0..3 {
            let a0 = random_tensor(&[3, 4], seed);
            let b0 = random_tensor(&[4, 2], seed + 100);
            let err = check_gradients(&[a0, b0], |tape, p| {
                let c = tape.matmul(p[0], p[1]).unwrap();
                let c2 = tape.mul(c, c).unwrap();
                tape.sum(c2)
            });
            assert!(err < 1e-6, "rel err {err}");
        }
    }

    #[test]
    fn relu_and_leaky_relu() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let r = tape.relu(x);
        assert_eq!(tape.value(r).values(), &[0.0, 0.0, 2.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(-2.0));
        let y = tape.leaky_relu(x, 0.2);
        tape.backward(y).unwrap();
        assert!((tape.grad(x).unwrap().values()[0] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn dropout_eval_is_identity_and_rate_is_validated() {
        let mut tape = Tape::new();
        let x = tape.leaf(random_tensor(&[4, 3], 1));
        let key = DropoutKey::new(1, 0, 0);
        let y = tape.dropout(x, 0.3, false, key).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
        assert!(matches!(
            tape.dropout(x, 1.0, true, key),
            Err(TensorError::Config(_))
        ));
        assert!(matches!(
            tape.dropout(x, -0.1, true, key),
            Err(TensorError::Config(_))
        ));
    }

    #[test]
    fn dropout_mask_is_keyed_and_scaled() {
        let x = Tensor::full(&[50, 40], 1.0);
        let run = |key| {
            let mut tape = Tape::new();
            let v = tape.constant(x.clone());
            let y = tape.dropout(v, 0.3, true, key).unwrap();
            tape.value(y).clone()
        };
        let a = run(DropoutKey::new(7, 3, 1));
        assert_eq!(a, run(DropoutKey::new(7, 3, 1)));
        assert_ne!(a, run(DropoutKey::new(7, 4, 1)));
        let kept = a.values().iter().filter(|&&v| v != 0.0).count() as f64 / a.len() as f64;
        assert!((kept - 0.7).abs() < 0.05, "kept fraction {kept}");
        assert!(a
            .values()
            .iter()
            .all(|&v| v == 0.0 || (v - 1.0 / 0.7).abs() < 1e-12));
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![2], vec![1.0, 0.0]).unwrap());
        assert!(matches!(
            tape.log(x),
            Err(TensorError::Domain { op: "log", .. })
        ));
    }

    #[test]
    fn softmax_cases() {
        let mut tape = Tape::new();
        let s = tape.constant(t(&[vec![0.0, 0.0]]));
        let y = tape.row_softmax(s, None).unwrap();
        assert_eq!(tape.value(y).values(), &[0.5, 0.5]);

        let s = tape.constant(t(&[vec![3.0, -1.0, 2.0], vec![0.1, 0.2, 0.3]]));
        let mask = [false, true, false, true, true, false];
        let y = tape.row_softmax(s, Some(&mask)).unwrap();
        let v = tape.value(y).values();
        assert_eq!(v[1], 1.0);
        assert_eq!(v[0], 0.0);
        assert_eq!(v[2], 0.0);
        assert_eq!(v[5], 0.0);
        assert!((v[3] + v[4] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_large_logits_match_extended_precision() {
        // exp(-1000) underflows even in f64; the exact value 1/(1+e^-1000)
        // rounds to 1 and e^-1000/(1+e^-1000) to 0.
        let mut tape = Tape::new();
        let s = tape.constant(t(&[vec![1000.0, 0.0], vec![-1000.0, -999.0]]));
        let y = tape.row_softmax(s, None).unwrap();
        let v = tape.value(y).values();
        assert_eq!(v[0], 1.0);
        assert_eq!(v[1], 0.0);
        // second row: 1/(1+e) and e/(1+e)
        let e = std::f64::consts::E;
        assert!((v[2] - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((v[3] - e / (1.0 + e)).abs() < 1e-15);
        assert!(v.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn softmax_fully_masked_row_is_reported() {
        let mut tape = Tape::new();
        let s = tape.constant(t(&[vec![1.0, 2.0], vec![1.0, 2.0]]));
        let err = tape
            .row_softmax(s, Some(&[true, false, false, false]))
            .unwrap_err();
        assert_eq!(err, TensorError::DegenerateRow { row: 1 });
    }

    #[test]
    fn layer_norm_forced_values() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[vec![5.0, 5.0, 5.0], vec![1.0, 3.0, 2.0]]));
        let g = tape.constant(Tensor::full(&[3], 1.0));
        let b = tape.constant(Tensor::zeros(&[3]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        let v = tape.value(y).values();
        assert!(v[..3].iter().all(|&x| x == 0.0));

        let x = tape.constant(t(&[vec![1.0, 3.0]]));
        let g = tape.constant(Tensor::full(&[2], 1.0));
        let b = tape.constant(Tensor::zeros(&[2]));
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        let v = tape.value(y).values();
        assert!((v[0] + 1.0).abs() < 1e-9 && (v[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn layer_norm_gradient_check() {
        for seed in 0..3 {
            let x = random_tensor(&[4, 5], seed);
            let g = random_tensor(&[5], seed + 10);
            let b = random_tensor(&[5], seed + 20);
            let w = random_tensor(&[4, 5], seed + 30);
            let err = check_gradients(&[x, g, b], |tape, p| {
                let y = tape.layer_norm(p[0], p[1], p[2], 1e-5).unwrap();
                let wv = tape.constant(w.clone());
                let z = tape.mul(y, wv).unwrap();
                let z = tape.mul(z, y).unwrap();
                tape.sum(z)
            });
            assert!(err < 1e-5, "rel err {err}");
        }
    }

    #[test]
    fn backward_simple_cases() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![3], vec![1.0, -4.0, 2.5]).unwrap());
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().values(), &[1.0, 1.0, 1.0]);
        // accumulation without reset
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().values(), &[2.0, 2.0, 2.0]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().values(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]));
        assert!(matches!(tape.backward(x), Err(TensorError::Contract(_))));
    }

    #[test]
    fn scalar_broadcast_gradients() {
        let x0 = random_tensor(&[3, 2], 4);
        let s0 = random_tensor(&[1, 1], 5);
        let err = check_gradients(&[x0, s0], |tape, p| {
            let a = tape.mul(p[0], p[1]).unwrap();
            let b = tape.sub(p[1], a).unwrap();
            let c = tape.add(b, p[1]).unwrap();
            let c = tape.mul(c, c).unwrap();
            tape.sum(c)
        });
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn elementwise_and_softmax_gradients() {
        for seed in 0..4 {
            let x0 = random_tensor(&[3, 4], seed);
            let w = random_tensor(&[3, 4], seed + 50);
            let err = check_gradients(&[x0], |tape, p| {
                let e = tape.exp(p[0]);
                let l = tape.log(e).unwrap();
                let r = tape.leaky_relu(l, 0.2);
                let s = tape.row_softmax(r, None).unwrap();
                let ls = tape.log_softmax(r);
                let n = tape.row_normalize(e).unwrap();
                let wv = tape.constant(w.clone());
                let a = tape.mul(s, wv).unwrap();
                let b = tape.mul(ls, wv).unwrap();
                let c = tape.mul(n, wv).unwrap();
                let ab = tape.add(a, b).unwrap();
                let abc = tape.add(ab, c).unwrap();
                tape.sum(abc)
            });
            assert!(err < 1e-6, "rel err {err}");
        }
    }

    #[test]
    fn structural_op_gradients() {
        let a0 = random_tensor(&[4, 2], 1);
        let b0 = random_tensor(&[4, 3], 2);
        let w = random_tensor(&[3, 5], 3);
        let err = check_gradients(&[a0, b0], |tape, p| {
            let c = tape.concat_cols(&[p[0], p[1]]).unwrap();
            let g = tape.gather_rows(c, &[3, 0, 3]).unwrap();
            let wv = tape.constant(w.clone());
            let h = tape.mul(g, wv).unwrap();
            let s = tape.select(h, 4).unwrap();
            let sq = tape.mul(s, h).unwrap();
            tape.sum(sq)
        });
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn masked_nll_gradient_and_value() {
        let logits = random_tensor(&[5, 3], 9);
        let labels = vec![0, 2, 1, 1, 0];
        let err = check_gradients(std::slice::from_ref(&logits), |tape, p| {
            let lp = tape.log_softmax(p[0]);
            tape.masked_nll(lp, &[0, 1, 3], &labels, Some(&[1.0, 2.0, 0.5]))
                .unwrap()
        });
        assert!(err < 1e-6, "rel err {err}");

        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 4]));
        let lp = tape.log_softmax(x);
        let l = tape.masked_nll(lp, &[0, 1], &[3, 1], None).unwrap();
        assert!((tape.value(l).values()[0] - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn plan_cost_gradient() {
        let x0 = random_tensor(&[3, 2], 11);
        let y0 = random_tensor(&[2, 2], 12);
        let plan = [0.2, 0.133, 0.0, 0.3333, 0.2, 0.1337];
        for p in [1.0, 2.0, 3.0] {
            let err = check_gradients(&[x0.clone(), y0.clone()], |tape, v| {
                tape.plan_cost(v[0], v[1], &plan, p).unwrap()
            });
            assert!(err < 1e-6, "p={p} rel err {err}");
        }
    }
}
