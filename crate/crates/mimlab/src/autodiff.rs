//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation in append order; [`Tape::backward`]
//! replays the records in reverse, accumulating exact vector-Jacobian
//! products into per-node gradient buffers. The op set is deliberately
//! small: elementwise arithmetic, matrix multiply, a handful of
//! activations/reductions, and three explicit shape-coercion ops
//! (`Broadcast`, `StackCols`, `Transpose`). There is no implicit
//! broadcasting beyond bias-add and scalar scaling; everything else must
//! be coerced explicitly, which keeps the surface easy to verify against
//! finite differences.
//!
//! Tapes are single-threaded by construction (`&mut self` everywhere).
//! Detached [`Tensor`]s are plain immutable values and can be shared
//! freely across threads.

use thiserror::Error;

/// ln(2*pi), used by Gaussian log-densities downstream.
pub const LN_2PI: f64 = 1.837_877_066_409_345_3;
/// 0.5 * ln(2*pi).
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Debug, Error)]
pub enum AdError {
    #[error("{op}: shape mismatch ({details})")]
    ShapeMismatch { op: &'static str, details: String },
    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("{op}: unsupported rank {rank} (only scalars, vectors and matrices)")]
    UnsupportedRank { op: &'static str, rank: usize },
    #[error("apply({op}) expects {expected} input(s), got {got}")]
    Arity { op: &'static str, expected: usize, got: usize },
}

pub type AdResult<T> = Result<T, AdError>;

/// A dense multi-dimensional array of f64 in row-major order.
///
/// Rank 0 (scalar), 1 (vector) and 2 (matrix) are supported. A `Tensor`
/// detached from any tape is immutable data with no gradient identity.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> AdResult<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(AdError::ShapeMismatch {
                op: "tensor",
                details: format!("shape {:?} implies {} values, got {}", shape, numel, data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], data: vec![v] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> AdResult<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; numel] }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![v; numel] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// Value of a scalar tensor. Panics on non-scalars.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on non-scalar tensor {:?}", self.shape);
        self.data[0]
    }

    /// Rows of a matrix, or the length of a vector viewed as one row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => panic!("rows() on rank-{} tensor", self.shape.len()),
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            _ => panic!("cols() on rank-{} tensor", self.shape.len()),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Operation kinds accepted by [`Tape::apply`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    MatMul,
    /// `[n,d] + [d]`, the only implicit broadcast besides scalar scaling.
    BiasAdd,
    Tanh,
    /// x * sigmoid(x).
    Swish,
    Exp,
    Log,
    Neg,
    Square,
    /// Multiply by a compile-time-known scalar constant.
    Scale(f64),
    /// Clamp to [lo, hi]; gradient is zero outside the active range.
    Clamp(f64, f64),
    /// Sum all entries (None) or along an axis of a matrix/vector.
    Sum(Option<usize>),
    Mean(Option<usize>),
    /// Max-subtracted log-sum-exp along an axis.
    LogSumExp(usize),
    /// Prepend an axis of the given extent: `[] -> [n]` or `[d] -> [n,d]`.
    Broadcast(usize),
    /// Stack K same-length vectors as the columns of an `[n,K]` matrix
    /// (or K scalars into a `[K]` vector).
    StackCols,
    Transpose,
}

impl OpKind {
    fn name(self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::MatMul => "matmul",
            OpKind::BiasAdd => "bias-add",
            OpKind::Tanh => "tanh",
            OpKind::Swish => "swish",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Neg => "neg",
            OpKind::Square => "square",
            OpKind::Scale(_) => "scale",
            OpKind::Clamp(_, _) => "clamp",
            OpKind::Sum(_) => "sum",
            OpKind::Mean(_) => "mean",
            OpKind::LogSumExp(_) => "log-sum-exp",
            OpKind::Broadcast(_) => "broadcast",
            OpKind::StackCols => "stack-cols",
            OpKind::Transpose => "transpose",
        }
    }
}

#[derive(Debug, Clone)]
enum Record {
    Leaf,
    Unary(OpKind, usize),
    Binary(OpKind, usize, usize),
    Nary(OpKind, Vec<usize>),
}

struct Node {
    record: Record,
    value: Tensor,
}

/// Append-only computation graph. Node order is topological by
/// construction; backward visits each node exactly once in reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `out += a @ b` for row-major `a: m*k`, `b: k*n`.
fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
}

/// `out += g @ b^T` for `g: m*n`, `b: k*n` (used for dA in matmul backward).
fn matmul_bt_acc(g: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (p, o) in orow.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for (gv, bv) in grow.iter().zip(brow.iter()) {
                s += gv * bv;
            }
            *o += s;
        }
    }
}

/// `out += a^T @ g` for `a: m*k`, `g: m*n` (used for dB in matmul backward).
fn matmul_at_acc(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow.iter()) {
                *o += av * gv;
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a leaf tensor (inputs, parameters, frozen noise alike).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node { record: Record::Leaf, value: t });
        Var(id)
    }

    /// Leaf from a scalar value.
    pub fn scalar(&mut self, v: f64) -> Var {
        self.leaf(Tensor::scalar(v))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, record: Record, value: Tensor, op: &'static str) -> AdResult<Var> {
        if !value.all_finite() {
            return Err(AdError::NonFinite { op });
        }
        let id = self.nodes.len();
        self.nodes.push(Node { record, value });
        Ok(Var(id))
    }

    fn check_var(&self, v: Var, op: &'static str) -> AdResult<()> {
        if v.0 >= self.nodes.len() {
            return Err(AdError::ShapeMismatch {
                op,
                details: format!("node id {} not on this tape (len {})", v.0, self.nodes.len()),
            });
        }
        Ok(())
    }

    /// Generic dispatch over the op set. The named methods below are thin
    /// wrappers around this.
    pub fn apply(&mut self, kind: OpKind, inputs: &[Var]) -> AdResult<Var> {
        let need = match kind {
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::MatMul | OpKind::BiasAdd => 2,
            OpKind::StackCols => inputs.len().max(1),
            _ => 1,
        };
        if inputs.len() != need {
            return Err(AdError::Arity { op: kind.name(), expected: need, got: inputs.len() });
        }
        for &v in inputs {
            self.check_var(v, kind.name())?;
        }
        match kind {
            OpKind::Add | OpKind::Sub | OpKind::Mul => self.elementwise_binary(kind, inputs[0], inputs[1]),
            OpKind::MatMul => self.matmul_op(inputs[0], inputs[1]),
            OpKind::BiasAdd => self.bias_add_op(inputs[0], inputs[1]),
            OpKind::Tanh | OpKind::Swish | OpKind::Exp | OpKind::Log | OpKind::Neg | OpKind::Square
            | OpKind::Scale(_) | OpKind::Clamp(_, _) => self.elementwise_unary(kind, inputs[0]),
            OpKind::Sum(axis) | OpKind::Mean(axis) => self.reduce_op(kind, inputs[0], axis),
            OpKind::LogSumExp(axis) => self.logsumexp_op(inputs[0], axis),
            OpKind::Broadcast(rows) => self.broadcast_op(inputs[0], rows),
            OpKind::StackCols => self.stack_cols_op(inputs),
            OpKind::Transpose => self.transpose_op(inputs[0]),
        }
    }

    fn elementwise_binary(&mut self, kind: OpKind, a: Var, b: Var) -> AdResult<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(AdError::ShapeMismatch {
                op: kind.name(),
                details: format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            });
        }
        let data: Vec<f64> = match kind {
            OpKind::Add => ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect(),
            OpKind::Sub => ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect(),
            OpKind::Mul => ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect(),
            _ => unreachable!(),
        };
        let shape = ta.shape().to_vec();
        self.push(Record::Binary(kind, a.0, b.0), Tensor { shape, data }, kind.name())
    }

    fn elementwise_unary(&mut self, kind: OpKind, a: Var) -> AdResult<Var> {
        let ta = &self.nodes[a.0].value;
        let data: Vec<f64> = match kind {
            OpKind::Tanh => ta.data().iter().map(|&x| x.tanh()).collect(),
            OpKind::Swish => ta.data().iter().map(|&x| x * sigmoid(x)).collect(),
            OpKind::Exp => ta.data().iter().map(|&x| x.exp()).collect(),
            OpKind::Log => ta.data().iter().map(|&x| x.ln()).collect(),
            OpKind::Neg => ta.data().iter().map(|&x| -x).collect(),
            OpKind::Square => ta.data().iter().map(|&x| x * x).collect(),
            OpKind::Scale(c) => ta.data().iter().map(|&x| c * x).collect(),
            OpKind::Clamp(lo, hi) => {
                assert!(lo <= hi, "clamp bounds out of order");
                ta.data().iter().map(|&x| x.clamp(lo, hi)).collect()
            }
            _ => unreachable!(),
        };
        let shape = ta.shape().to_vec();
        self.push(Record::Unary(kind, a.0), Tensor { shape, data }, kind.name())
    }

    fn matmul_op(&mut self, a: Var, b: Var) -> AdResult<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(AdError::ShapeMismatch {
                op: "matmul",
                details: format!("{:?} x {:?}", ta.shape(), tb.shape()),
            });
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        matmul_acc(ta.data(), tb.data(), m, k, n, &mut out);
        self.push(Record::Binary(OpKind::MatMul, a.0, b.0), Tensor { shape: vec![m, n], data: out }, "matmul")
    }

    fn bias_add_op(&mut self, x: Var, b: Var) -> AdResult<Var> {
        let (tx, tb) = (&self.nodes[x.0].value, &self.nodes[b.0].value);
        if tx.shape().len() != 2 || tb.shape().len() != 1 || tx.shape()[1] != tb.shape()[0] {
            return Err(AdError::ShapeMismatch {
                op: "bias-add",
                details: format!("{:?} + {:?}", tx.shape(), tb.shape()),
            });
        }
        let (m, n) = (tx.shape()[0], tx.shape()[1]);
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                data.push(tx.data()[i * n + j] + tb.data()[j]);
            }
        }
        self.push(Record::Binary(OpKind::BiasAdd, x.0, b.0), Tensor { shape: vec![m, n], data }, "bias-add")
    }

    fn reduce_op(&mut self, kind: OpKind, a: Var, axis: Option<usize>) -> AdResult<Var> {
        let ta = &self.nodes[a.0].value;
        let name = kind.name();
        let mean = matches!(kind, OpKind::Mean(_));
        let value = match axis {
            None => {
                let s: f64 = ta.data().iter().sum();
                Tensor::scalar(if mean { s / ta.len() as f64 } else { s })
            }
            Some(ax) => match ta.shape().len() {
                1 => {
                    if ax != 0 {
                        return Err(AdError::ShapeMismatch { op: name, details: format!("axis {} on vector", ax) });
                    }
                    let s: f64 = ta.data().iter().sum();
                    Tensor::scalar(if mean { s / ta.len() as f64 } else { s })
                }
                2 => {
                    let (m, n) = (ta.shape()[0], ta.shape()[1]);
                    match ax {
                        0 => {
                            let mut out = vec![0.0; n];
                            for i in 0..m {
                                for j in 0..n {
                                    out[j] += ta.data()[i * n + j];
                                }
                            }
                            if mean {
                                for o in &mut out {
                                    *o /= m as f64;
                                }
                            }
                            Tensor::vector(out)
                        }
                        1 => {
                            let mut out = vec![0.0; m];
                            for i in 0..m {
                                let row = &ta.data()[i * n..(i + 1) * n];
                                let s: f64 = row.iter().sum();
                                out[i] = if mean { s / n as f64 } else { s };
                            }
                            Tensor::vector(out)
                        }
                        _ => {
                            return Err(AdError::ShapeMismatch { op: name, details: format!("axis {} on matrix", ax) })
                        }
                    }
                }
                r => return Err(AdError::UnsupportedRank { op: name, rank: r }),
            },
        };
        self.push(Record::Unary(kind, a.0), value, name)
    }

    fn logsumexp_op(&mut self, a: Var, axis: usize) -> AdResult<Var> {
        let ta = &self.nodes[a.0].value;
        let lse_slice = |s: &[f64]| -> f64 {
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = s.iter().map(|&x| (x - m).exp()).sum();
            m + sum.ln()
        };
        let value = match ta.shape().len() {
            1 => {
                if axis != 0 {
                    return Err(AdError::ShapeMismatch { op: "log-sum-exp", details: format!("axis {} on vector", axis) });
                }
                Tensor::scalar(lse_slice(ta.data()))
            }
            2 => {
                let (m, n) = (ta.shape()[0], ta.shape()[1]);
                match axis {
                    1 => {
                        let out: Vec<f64> = (0..m).map(|i| lse_slice(&ta.data()[i * n..(i + 1) * n])).collect();
                        Tensor::vector(out)
                    }
                    0 => {
                        let mut out = vec![0.0; n];
                        for (j, o) in out.iter_mut().enumerate() {
                            let col: Vec<f64> = (0..m).map(|i| ta.data()[i * n + j]).collect();
                            *o = lse_slice(&col);
                        }
                        Tensor::vector(out)
                    }
                    _ => {
                        return Err(AdError::ShapeMismatch {
                            op: "log-sum-exp",
                            details: format!("axis {} on matrix", axis),
                        })
                    }
                }
            }
            r => return Err(AdError::UnsupportedRank { op: "log-sum-exp", rank: r }),
        };
        self.push(Record::Unary(OpKind::LogSumExp(axis), a.0), value, "log-sum-exp")
    }

    fn broadcast_op(&mut self, a: Var, rows: usize) -> AdResult<Var> {
        let ta = &self.nodes[a.0].value;
        let value = match ta.shape().len() {
            0 => Tensor::filled(&[rows], ta.item()),
            1 => {
                let d = ta.len();
                let mut data = Vec::with_capacity(rows * d);
                for _ in 0..rows {
                    data.extend_from_slice(ta.data());
                }
                Tensor { shape: vec![rows, d], data }
            }
            r => return Err(AdError::UnsupportedRank { op: "broadcast", rank: r }),
        };
        self.push(Record::Unary(OpKind::Broadcast(rows), a.0), value, "broadcast")
    }

    fn stack_cols_op(&mut self, inputs: &[Var]) -> AdResult<Var> {
        let k = inputs.len();
        let first = &self.nodes[inputs[0].0].value;
        let value = match first.shape().len() {
            0 => {
                let mut data = Vec::with_capacity(k);
                for &v in inputs {
                    let t = &self.nodes[v.0].value;
                    if !t.is_scalar() {
                        return Err(AdError::ShapeMismatch {
                            op: "stack-cols",
                            details: format!("mixed shapes: [] vs {:?}", t.shape()),
                        });
                    }
                    data.push(t.item());
                }
                Tensor::vector(data)
            }
            1 => {
                let n = first.len();
                for &v in inputs {
                    let t = &self.nodes[v.0].value;
                    if t.shape() != [n] {
                        return Err(AdError::ShapeMismatch {
                            op: "stack-cols",
                            details: format!("[{}] vs {:?}", n, t.shape()),
                        });
                    }
                }
                let mut data = vec![0.0; n * k];
                for (c, &v) in inputs.iter().enumerate() {
                    let t = &self.nodes[v.0].value;
                    for i in 0..n {
                        data[i * k + c] = t.data()[i];
                    }
                }
                Tensor { shape: vec![n, k], data }
            }
            r => return Err(AdError::UnsupportedRank { op: "stack-cols", rank: r }),
        };
        self.push(Record::Nary(OpKind::StackCols, inputs.iter().map(|v| v.0).collect()), value, "stack-cols")
    }

    fn transpose_op(&mut self, a: Var) -> AdResult<Var> {
        let ta = &self.nodes[a.0].value;
        if ta.shape().len() != 2 {
            return Err(AdError::UnsupportedRank { op: "transpose", rank: ta.shape().len() });
        }
        let (m, n) = (ta.shape()[0], ta.shape()[1]);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = ta.data()[i * n + j];
            }
        }
        self.push(Record::Unary(OpKind::Transpose, a.0), Tensor { shape: vec![n, m], data }, "transpose")
    }

    // Named wrappers.

    pub fn add(&mut self, a: Var, b: Var) -> AdResult<Var> {
        self.apply(OpKind::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> AdResult<Var> {
        self.apply(OpKind::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> AdResult<Var> {
        self.apply(OpKind::Mul, &[a, b])
    }
    pub fn matmul(&mut self, a: Var, b: Var) -> AdResult<Var> {
        self.apply(OpKind::MatMul, &[a, b])
    }
    pub fn bias_add(&mut self, x: Var, b: Var) -> AdResult<Var> {
        self.apply(OpKind::BiasAdd, &[x, b])
    }
    pub fn tanh(&mut self, a: Var) -> AdResult<Var> {
        self.apply(OpKind::Tanh, &[a])
    }
    pub fn swish(&mut self, a: Var) -> AdResult<Var> {
        self.apply(OpKind::Swish, &[a])
    }
    pub fn exp(&mut self, a: Var) -> AdResult<Var> {
        self.apply(OpKind::Exp, &[a])
    }
    pub fn log(&mut self, a: Var) -> AdResult<Var> {
        self.apply(OpKind::Log, &[a])
    }
    pub fn neg(&mut self, a: Var) -> AdResult<Var> {
        self.apply(OpKind::Neg, &[a])
    }
    pub fn square(&mut self, a: Var) -> AdResult<Var> {
        self.apply(OpKind::Square, &[a])
    }
    pub fn scale(&mut self, a: Var, c: f64) -> AdResult<Var> {
        self.apply(OpKind::Scale(c), &[a])
    }
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> AdResult<Var> {
        self.apply(OpKind::Clamp(lo, hi), &[a])
    }
    pub fn sum(&mut self, a: Var) -> AdResult<Var> {
        self.apply(OpKind::Sum(None), &[a])
    }
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> AdResult<Var> {
        self.apply(OpKind::Sum(Some(axis)), &[a])
    }
    pub fn mean(&mut self, a: Var) -> AdResult<Var> {
        self.apply(OpKind::Mean(None), &[a])
    }
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> AdResult<Var> {
        self.apply(OpKind::Mean(Some(axis)), &[a])
    }
    pub fn logsumexp(&mut self, a: Var, axis: usize) -> AdResult<Var> {
        self.apply(OpKind::LogSumExp(axis), &[a])
    }
    pub fn broadcast(&mut self, a: Var, rows: usize) -> AdResult<Var> {
        self.apply(OpKind::Broadcast(rows), &[a])
    }
    pub fn stack_cols(&mut self, inputs: &[Var]) -> AdResult<Var> {
        self.apply(OpKind::StackCols, inputs)
    }
    pub fn transpose(&mut self, a: Var) -> AdResult<Var> {
        self.apply(OpKind::Transpose, &[a])
    }

    /// Reverse pass from a scalar loss. Returns the gradient of the loss
    /// with respect to every node; leaves not on any path get zeros from
    /// [`Gradients::wrt`].
    pub fn backward(&self, loss: Var) -> AdResult<Gradients> {
        self.check_var(loss, "backward")?;
        let loss_t = &self.nodes[loss.0].value;
        if !loss_t.is_scalar() {
            return Err(AdError::NonScalarLoss { shape: loss_t.shape().to_vec() });
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[i];
            match &node.record {
                Record::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Record::Unary(kind, a) => {
                    self.vjp_unary(*kind, *a, i, &g, &mut grads);
                }
                Record::Binary(kind, a, b) => {
                    self.vjp_binary(*kind, *a, *b, &g, &mut grads);
                }
                Record::Nary(OpKind::StackCols, inputs) => {
                    let k = inputs.len();
                    for (c, &a) in inputs.iter().enumerate() {
                        let ta = &self.nodes[a].value;
                        let buf = grads[a].get_or_insert_with(|| vec![0.0; ta.len()]);
                        if ta.is_scalar() {
                            buf[0] += g[c];
                        } else {
                            for i_row in 0..ta.len() {
                                buf[i_row] += g[i_row * k + c];
                            }
                        }
                    }
                }
                Record::Nary(_, _) => unreachable!(),
            }
        }

        let mut out = Vec::with_capacity(n);
        for (i, g) in grads.into_iter().enumerate() {
            match &self.nodes[i].record {
                Record::Leaf => out.push(g.map(|data| Tensor {
                    shape: self.nodes[i].value.shape().to_vec(),
                    data,
                })),
                // Interior activations are not reported; callers only ever
                // ask for leaf gradients.
                _ => out.push(None),
            }
        }
        Ok(Gradients { grads: out })
    }

    fn vjp_unary(&self, kind: OpKind, a: usize, out: usize, g: &[f64], grads: &mut Vec<Option<Vec<f64>>>) {
        let ta = &self.nodes[a].value;
        let ty = &self.nodes[out].value;
        let buf = grads[a].get_or_insert_with(|| vec![0.0; ta.len()]);
        match kind {
            OpKind::Tanh => {
                for ((b, &y), &gv) in buf.iter_mut().zip(ty.data()).zip(g) {
                    *b += gv * (1.0 - y * y);
                }
            }
            OpKind::Swish => {
                for ((b, &x), &gv) in buf.iter_mut().zip(ta.data()).zip(g) {
                    let s = sigmoid(x);
                    *b += gv * (s + x * s * (1.0 - s));
                }
            }
            OpKind::Exp => {
                for ((b, &y), &gv) in buf.iter_mut().zip(ty.data()).zip(g) {
                    *b += gv * y;
                }
            }
            OpKind::Log => {
                for ((b, &x), &gv) in buf.iter_mut().zip(ta.data()).zip(g) {
                    *b += gv / x;
                }
            }
            OpKind::Neg => {
                for (b, &gv) in buf.iter_mut().zip(g) {
                    *b -= gv;
                }
            }
            OpKind::Square => {
                for ((b, &x), &gv) in buf.iter_mut().zip(ta.data()).zip(g) {
                    *b += gv * 2.0 * x;
                }
            }
            OpKind::Scale(c) => {
                for (b, &gv) in buf.iter_mut().zip(g) {
                    *b += c * gv;
                }
            }
            OpKind::Clamp(lo, hi) => {
                for ((b, &x), &gv) in buf.iter_mut().zip(ta.data()).zip(g) {
                    if x >= lo && x <= hi {
                        *b += gv;
                    }
                }
            }
            OpKind::Sum(axis) => match (axis, ta.shape().len()) {
                (None, _) | (Some(_), 1) => {
                    for b in buf.iter_mut() {
                        *b += g[0];
                    }
                }
                (Some(ax), 2) => {
                    let (m, n) = (ta.shape()[0], ta.shape()[1]);
                    for i in 0..m {
                        for j in 0..n {
                            buf[i * n + j] += if ax == 0 { g[j] } else { g[i] };
                        }
                    }
                }
                _ => unreachable!(),
            },
            OpKind::Mean(axis) => match (axis, ta.shape().len()) {
                (None, _) | (Some(_), 1) => {
                    let inv = 1.0 / ta.len() as f64;
                    for b in buf.iter_mut() {
                        *b += g[0] * inv;
                    }
                }
                (Some(ax), 2) => {
                    let (m, n) = (ta.shape()[0], ta.shape()[1]);
                    let inv = 1.0 / if ax == 0 { m as f64 } else { n as f64 };
                    for i in 0..m {
                        for j in 0..n {
                            buf[i * n + j] += inv * if ax == 0 { g[j] } else { g[i] };
                        }
                    }
                }
                _ => unreachable!(),
            },
            OpKind::LogSumExp(axis) => {
                // d lse / d x_i = exp(x_i - lse)
                match ta.shape().len() {
                    1 => {
                        let lse = ty.item();
                        for ((b, &x), &gv) in buf.iter_mut().zip(ta.data()).zip(std::iter::repeat(&g[0])) {
                            *b += gv * (x - lse).exp();
                        }
                    }
                    2 => {
                        let (m, n) = (ta.shape()[0], ta.shape()[1]);
                        if axis == 1 {
                            for i in 0..m {
                                let lse = ty.data()[i];
                                for j in 0..n {
                                    buf[i * n + j] += g[i] * (ta.data()[i * n + j] - lse).exp();
                                }
                            }
                        } else {
                            for j in 0..n {
                                let lse = ty.data()[j];
                                for i in 0..m {
                                    buf[i * n + j] += g[j] * (ta.data()[i * n + j] - lse).exp();
                                }
                            }
                        }
                    }
                    _ => unreachable!(),
                }
            }
            OpKind::Broadcast(rows) => {
                let d = ta.len();
                for r in 0..rows {
                    for j in 0..d {
                        buf[j] += g[r * d + j];
                    }
                }
            }
            OpKind::Transpose => {
                let (n, m) = (ty.shape()[0], ty.shape()[1]); // out is n x m, in is m x n
                for i in 0..n {
                    for j in 0..m {
                        buf[i + j * n] += g[i * m + j];
                    }
                }
            }
            _ => unreachable!(),
        }
    }

    fn vjp_binary(&self, kind: OpKind, a: usize, b: usize, g: &[f64], grads: &mut Vec<Option<Vec<f64>>>) {
        match kind {
            OpKind::Add => {
                {
                    let ta = &self.nodes[a].value;
                    let buf = grads[a].get_or_insert_with(|| vec![0.0; ta.len()]);
                    for (x, &gv) in buf.iter_mut().zip(g) {
                        *x += gv;
                    }
                }
                let tb = &self.nodes[b].value;
                let buf = grads[b].get_or_insert_with(|| vec![0.0; tb.len()]);
                for (x, &gv) in buf.iter_mut().zip(g) {
                    *x += gv;
                }
            }
            OpKind::Sub => {
                {
                    let ta = &self.nodes[a].value;
                    let buf = grads[a].get_or_insert_with(|| vec![0.0; ta.len()]);
                    for (x, &gv) in buf.iter_mut().zip(g) {
                        *x += gv;
                    }
                }
                let tb = &self.nodes[b].value;
                let buf = grads[b].get_or_insert_with(|| vec![0.0; tb.len()]);
                for (x, &gv) in buf.iter_mut().zip(g) {
                    *x -= gv;
                }
            }
            OpKind::Mul => {
                {
                    let bdata: Vec<f64> = self.nodes[b].value.data().to_vec();
                    let ta = &self.nodes[a].value;
                    let buf = grads[a].get_or_insert_with(|| vec![0.0; ta.len()]);
                    for ((x, &bv), &gv) in buf.iter_mut().zip(bdata.iter()).zip(g) {
                        *x += gv * bv;
                    }
                }
                let adata: Vec<f64> = self.nodes[a].value.data().to_vec();
                let tb = &self.nodes[b].value;
                let buf = grads[b].get_or_insert_with(|| vec![0.0; tb.len()]);
                for ((x, &av), &gv) in buf.iter_mut().zip(adata.iter()).zip(g) {
                    *x += gv * av;
                }
            }
            OpKind::MatMul => {
                let (m, k) = (self.nodes[a].value.shape()[0], self.nodes[a].value.shape()[1]);
                let n = self.nodes[b].value.shape()[1];
                {
                    let bdata = self.nodes[b].value.data();
                    // dA += g @ B^T
                    let mut da = vec![0.0; m * k];
                    matmul_bt_acc(g, bdata, m, n, k, &mut da);
                    let buf = grads[a].get_or_insert_with(|| vec![0.0; m * k]);
                    for (x, d) in buf.iter_mut().zip(da) {
                        *x += d;
                    }
                }
                let adata = self.nodes[a].value.data();
                // dB += A^T @ g
                let mut db = vec![0.0; k * n];
                matmul_at_acc(adata, g, m, k, n, &mut db);
                let buf = grads[b].get_or_insert_with(|| vec![0.0; k * n]);
                for (x, d) in buf.iter_mut().zip(db) {
                    *x += d;
                }
            }
            OpKind::BiasAdd => {
                let (m, n) = (self.nodes[a].value.shape()[0], self.nodes[a].value.shape()[1]);
                {
                    let buf = grads[a].get_or_insert_with(|| vec![0.0; m * n]);
                    for (x, &gv) in buf.iter_mut().zip(g) {
                        *x += gv;
                    }
                }
                let buf = grads[b].get_or_insert_with(|| vec![0.0; n]);
                for i in 0..m {
                    for j in 0..n {
                        buf[j] += g[i * n + j];
                    }
                }
            }
            _ => unreachable!(),
        }
    }
}

/// Gradients keyed by leaf node, produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient w.r.t. a leaf, or `None` if the leaf did not influence the
    /// loss.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient w.r.t. a leaf, with zeros for unused leaves.
    pub fn wrt_or_zero(&self, v: Var, shape: &[usize]) -> Tensor {
        match self.wrt(v) {
            Some(t) => t.clone(),
            None => Tensor::zeros(shape),
        }
    }
}

/// Max relative error between the analytic gradient of `f` at `point` and
/// central finite differences with the given step.
///
/// `f` must be deterministic: it is re-run on fresh tapes for every
/// perturbed coordinate.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> AdResult<f64>
where
    F: Fn(&mut Tape, Var) -> AdResult<Var>,
{
    assert!(step > 0.0, "grad_check step must be positive");
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone());
    let loss = f(&mut tape, x)?;
    let loss_t = tape.value(loss);
    if !loss_t.is_scalar() {
        return Err(AdError::NonScalarLoss { shape: loss_t.shape().to_vec() });
    }
    let grads = tape.backward(loss)?;
    let analytic = grads.wrt_or_zero(x, point.shape());

    let mut max_err: f64 = 0.0;
    for i in 0..point.len() {
        let eval = |delta: f64| -> AdResult<f64> {
            let mut t = Tape::new();
            let mut p = point.clone();
            p.data_mut()[i] += delta;
            let v = t.leaf(p);
            let l = f(&mut t, v)?;
            let item = t.value(l).item();
            if !item.is_finite() {
                return Err(AdError::NonFinite { op: "grad-check" });
            }
            Ok(item)
        };
        let fd = (eval(step)? - eval(-step)?) / (2.0 * step);
        let err = (analytic.data()[i] - fd).abs() / fd.abs().max(1.0);
        max_err = max_err.max(err);
    }
    Ok(max_err)
}
