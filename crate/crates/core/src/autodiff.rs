//! Tape-based reverse-mode differentiation over `f64` tensors.
//!
//! A [`Tape`] records every primitive applied to its [`Var`] handles. Node ids
//! are assigned in application order, so the tape is topologically sorted by
//! construction and [`Tape::backward`] is a single reverse sweep.
//!
//! ```
//! use codesum::autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.wrt(x), vec![2.0, 4.0]);
//! ```
//!
//! Broadcasting is limited to [`Primitive::AddBias`]; every other binary
//! primitive requires identical shapes.

use thiserror::Error;

/// Lower clamp applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: {message}")]
    InvalidInput { op: &'static str, message: String },
    #[error("{op}: index {index} out of range for {bound}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("{op}: non-finite result")]
    NonFinite { op: &'static str },
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("variable {0} is not on this tape")]
    NotOnTape(usize),
    #[error("every position is masked")]
    AllMasked,
}

type Result<T> = std::result::Result<T, AutodiffError>;

/// Dense row-major tensor. A shape of `[]` denotes a scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(AutodiffError::InvalidInput {
                op: "tensor",
                message: format!("shape {shape:?} does not hold {} values", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Size of the last dimension (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of rows when viewed as `[numel / last_dim, last_dim]`.
    pub fn rows(&self) -> usize {
        self.data.len() / self.last_dim()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let n = self.last_dim();
        &self.data[r * n..(r + 1) * n]
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(AutodiffError::InvalidInput {
                op: "reshape",
                message: format!("cannot view {:?} as {shape:?}", self.shape),
            });
        }
        self.shape = shape;
        Ok(self)
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// The recorded operations. Data-carrying variants hold non-differentiable
/// arguments (indices, masks, slice bounds).
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    /// `A[m×k] · B[k×n]`.
    MatMul,
    /// `A[m×k] · B[n×k]ᵀ`, the affine-layer form for row inputs.
    MatMulBt,
    Add,
    /// `X[.., n] + b[n]` broadcast over leading dimensions. `b` may also be a
    /// single `[1×n]` row.
    AddBias,
    Mul,
    Tanh,
    Sigmoid,
    /// Softmax over the last dimension with max subtraction.
    Softmax,
    /// Softmax over the last dimension restricted to `true` positions; masked
    /// entries are exactly zero. The mask has length `last_dim`.
    MaskedSoftmax(Vec<bool>),
    /// Row gather from a `[V×E]` table.
    EmbeddingLookup(Vec<usize>),
    /// Juxtaposition along the last dimension.
    Concat,
    SliceLast { start: usize, len: usize },
    /// Stacks 2-D inputs (or vectors as single rows) with equal widths.
    StackRows,
    Sum,
    /// Mean of `-log probs[t, target_t]` over unmasked rows of `probs[T×V]`.
    MaskedCrossEntropy { targets: Vec<usize>, mask: Vec<bool> },
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::MatMulBt => "matmul_bt",
            Primitive::Add => "add",
            Primitive::AddBias => "add_bias",
            Primitive::Mul => "mul",
            Primitive::Tanh => "tanh",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Softmax => "softmax",
            Primitive::MaskedSoftmax(_) => "masked_softmax",
            Primitive::EmbeddingLookup(_) => "embedding_lookup",
            Primitive::Concat => "concat",
            Primitive::SliceLast { .. } => "slice_last",
            Primitive::StackRows => "stack_rows",
            Primitive::Sum => "sum",
            Primitive::MaskedCrossEntropy { .. } => "masked_cross_entropy",
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Option<Primitive>,
    inputs: Vec<usize>,
    value: Tensor,
}

/// Append-only record of a computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward sweep, indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    lens: Vec<usize>,
}

impl Gradients {
    /// Gradient for `var`, or `None` if the loss does not depend on it.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `var`, zero-filled when unreachable.
    pub fn wrt(&self, var: Var) -> Vec<f64> {
        self.get(var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; self.lens.get(var.0).copied().unwrap_or(0)])
    }
}

fn shape2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(AutodiffError::InvalidInput {
            op,
            message: format!("expected a matrix, got shape {other:?}"),
        }),
    }
}

// C[m×n] += A[m×k] · B[k×n]
fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cj, bj) in c_row.iter_mut().zip(b_row) {
                *cj += aip * bj;
            }
        }
    }
}

// C[m×n] += A[m×k] · B[n×k]ᵀ
fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            c[i * n + j] += a_row.iter().zip(b_row).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

// C[k×n] += A[m×k]ᵀ · B[m×n]
fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let c_row = &mut c[p * n..(p + 1) * n];
            for (cj, bj) in c_row.iter_mut().zip(b_row) {
                *cj += aip * bj;
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_row(row: &[f64], mask: Option<&[bool]>, out: &mut [f64]) -> Result<()> {
    let allowed = |j: usize| mask.map_or(true, |m| m[j]);
    let max = row
        .iter()
        .enumerate()
        .filter(|(j, _)| allowed(*j))
        .map(|(_, &x)| x)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(AutodiffError::AllMasked);
    }
    let mut total = 0.0;
    for (j, (o, &x)) in out.iter_mut().zip(row).enumerate() {
        *o = if allowed(j) { (x - max).exp() } else { 0.0 };
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
    Ok(())
}

fn forward(op: &Primitive, inputs: &[&Tensor]) -> Result<Tensor> {
    let name = op.name();
    let arity = |n: usize| -> Result<()> {
        if inputs.len() == n {
            Ok(())
        } else {
            Err(AutodiffError::InvalidInput {
                op: name,
                message: format!("expected {n} inputs, got {}", inputs.len()),
            })
        }
    };
    let same_shape = |a: &Tensor, b: &Tensor| -> Result<()> {
        if a.shape() == b.shape() {
            Ok(())
        } else {
            Err(AutodiffError::ShapeMismatch {
                op: name,
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            })
        }
    };
    let mismatch = |a: &Tensor, b: &Tensor| AutodiffError::ShapeMismatch {
        op: name,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    };

    let out = match op {
        Primitive::MatMul => {
            arity(2)?;
            let (m, k) = shape2(name, inputs[0])?;
            let (k2, n) = shape2(name, inputs[1])?;
            if k != k2 {
                return Err(mismatch(inputs[0], inputs[1]));
            }
            let mut c = vec![0.0; m * n];
            gemm_nn(inputs[0].data(), inputs[1].data(), &mut c, m, k, n);
            Tensor { shape: vec![m, n], data: c }
        }
        Primitive::MatMulBt => {
            arity(2)?;
            let (m, k) = shape2(name, inputs[0])?;
            let (n, k2) = shape2(name, inputs[1])?;
            if k != k2 {
                return Err(mismatch(inputs[0], inputs[1]));
            }
            let mut c = vec![0.0; m * n];
            gemm_nt(inputs[0].data(), inputs[1].data(), &mut c, m, k, n);
            Tensor { shape: vec![m, n], data: c }
        }
        Primitive::Add | Primitive::Mul => {
            arity(2)?;
            same_shape(inputs[0], inputs[1])?;
            let f = if *op == Primitive::Add {
                |x: f64, y: f64| x + y
            } else {
                |x: f64, y: f64| x * y
            };
            let data = inputs[0].data().iter().zip(inputs[1].data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor { shape: inputs[0].shape.clone(), data }
        }
        Primitive::AddBias => {
            arity(2)?;
            let (x, b) = (inputs[0], inputs[1]);
            if b.shape().len() > 2 || b.rows() != 1 || b.len() != x.last_dim() {
                return Err(mismatch(x, b));
            }
            let n = b.len();
            let data = x.data().iter().enumerate().map(|(i, &v)| v + b.data[i % n]).collect();
            Tensor { shape: x.shape.clone(), data }
        }
        Primitive::Tanh | Primitive::Sigmoid => {
            arity(1)?;
            let f = if *op == Primitive::Tanh { f64::tanh } else { sigmoid };
            Tensor {
                shape: inputs[0].shape.clone(),
                data: inputs[0].data().iter().map(|&x| f(x)).collect(),
            }
        }
        Primitive::Softmax | Primitive::MaskedSoftmax(_) => {
            arity(1)?;
            let x = inputs[0];
            let mask = match op {
                Primitive::MaskedSoftmax(mask) => {
                    if mask.len() != x.last_dim() {
                        return Err(AutodiffError::InvalidInput {
                            op: name,
                            message: format!("mask length {} vs last dim {}", mask.len(), x.last_dim()),
                        });
                    }
                    Some(mask.as_slice())
                }
                _ => None,
            };
            let n = x.last_dim();
            let mut data = vec![0.0; x.len()];
            for (r, out) in data.chunks_mut(n).enumerate() {
                softmax_row(x.row(r), mask, out)?;
            }
            Tensor { shape: x.shape.clone(), data }
        }
        Primitive::EmbeddingLookup(indices) => {
            arity(1)?;
            let (v, e) = shape2(name, inputs[0])?;
            if indices.is_empty() {
                return Err(AutodiffError::InvalidInput { op: name, message: "no indices".into() });
            }
            let mut data = Vec::with_capacity(indices.len() * e);
            for &i in indices {
                if i >= v {
                    return Err(AutodiffError::IndexOutOfRange { op: name, index: i, bound: v });
                }
                data.extend_from_slice(inputs[0].row(i));
            }
            Tensor { shape: vec![indices.len(), e], data }
        }
        Primitive::Concat => {
            if inputs.is_empty() {
                return Err(AutodiffError::InvalidInput { op: name, message: "no inputs".into() });
            }
            let lead = &inputs[0].shape()[..inputs[0].shape().len().saturating_sub(1)];
            for t in &inputs[1..] {
                if t.shape().len() != inputs[0].shape().len()
                    || &t.shape()[..t.shape().len().saturating_sub(1)] != lead
                {
                    return Err(mismatch(inputs[0], t));
                }
            }
            let rows = inputs[0].rows();
            let width: usize = inputs.iter().map(|t| t.last_dim()).sum();
            let mut data = Vec::with_capacity(rows * width);
            for r in 0..rows {
                for t in inputs {
                    data.extend_from_slice(t.row(r));
                }
            }
            let mut shape = lead.to_vec();
            shape.push(width);
            Tensor { shape, data }
        }
        Primitive::SliceLast { start, len } => {
            arity(1)?;
            let x = inputs[0];
            let n = x.last_dim();
            if *len == 0 || start + len > n {
                return Err(AutodiffError::IndexOutOfRange { op: name, index: start + len, bound: n });
            }
            let mut data = Vec::with_capacity(x.rows() * len);
            for r in 0..x.rows() {
                data.extend_from_slice(&x.row(r)[*start..start + len]);
            }
            let mut shape = x.shape.clone();
            *shape.last_mut().expect("non-scalar") = *len;
            Tensor { shape, data }
        }
        Primitive::StackRows => {
            if inputs.is_empty() {
                return Err(AutodiffError::InvalidInput { op: name, message: "no inputs".into() });
            }
            let width = inputs[0].last_dim();
            let mut data = Vec::new();
            for t in inputs {
                if t.shape().len() > 2 || t.last_dim() != width {
                    return Err(mismatch(inputs[0], t));
                }
                data.extend_from_slice(t.data());
            }
            Tensor { shape: vec![data.len() / width, width], data }
        }
        Primitive::Sum => {
            arity(1)?;
            Tensor::scalar(inputs[0].data().iter().sum())
        }
        Primitive::MaskedCrossEntropy { targets, mask } => {
            arity(1)?;
            let (t, v) = shape2(name, inputs[0])?;
            if targets.len() != t || mask.len() != t {
                return Err(AutodiffError::InvalidInput {
                    op: name,
                    message: format!("{t} rows but {} targets and {} mask entries", targets.len(), mask.len()),
                });
            }
            let count = mask.iter().filter(|&&m| m).count();
            if count == 0 {
                return Err(AutodiffError::AllMasked);
            }
            let mut total = 0.0;
            for (row, (&target, &m)) in targets.iter().zip(mask).enumerate() {
                if !m {
                    continue;
                }
                if target >= v {
                    return Err(AutodiffError::IndexOutOfRange { op: name, index: target, bound: v });
                }
                total -= inputs[0].data()[row * v + target].max(PROB_FLOOR).ln();
            }
            Tensor::scalar(total / count as f64)
        }
    };
    if out.data.iter().any(|x| !x.is_finite()) {
        return Err(AutodiffError::NonFinite { op: name });
    }
    Ok(out)
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize, delta: impl FnOnce(&mut [f64])) {
    let g = slot.get_or_insert_with(|| vec![0.0; len]);
    delta(g);
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            op: None,
            inputs: Vec::new(),
            value,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn check(&self, var: Var) -> Result<()> {
        if var.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(AutodiffError::NotOnTape(var.0))
        }
    }

    /// Runs `kind` forward on `inputs` and records the node.
    pub fn apply(&mut self, kind: Primitive, inputs: &[Var]) -> Result<Var> {
        for &v in inputs {
            self.check(v)?;
        }
        let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let value = forward(&kind, &values)?;
        self.nodes.push(Node {
            op: Some(kind),
            inputs: inputs.iter().map(|v| v.0).collect(),
            value,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MatMul, &[a, b])
    }

    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MatMulBt, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::AddBias, &[x, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mul, &[a, b])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Tanh, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Sigmoid, &[x])
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Softmax, &[x])
    }

    pub fn masked_softmax(&mut self, x: Var, mask: Vec<bool>) -> Result<Var> {
        self.apply(Primitive::MaskedSoftmax(mask), &[x])
    }

    pub fn embedding(&mut self, table: Var, indices: Vec<usize>) -> Result<Var> {
        self.apply(Primitive::EmbeddingLookup(indices), &[table])
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        self.apply(Primitive::Concat, parts)
    }

    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.apply(Primitive::SliceLast { start, len }, &[x])
    }

    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        self.apply(Primitive::StackRows, rows)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Sum, &[x])
    }

    pub fn masked_cross_entropy(&mut self, probs: Var, targets: Vec<usize>, mask: Vec<bool>) -> Result<Var> {
        self.apply(Primitive::MaskedCrossEntropy { targets, mask }, &[probs])
    }

    /// Reverse sweep from a scalar `loss`. Gradients are summed over fan-out.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check(loss)?;
        let loss_value = &self.nodes[loss.0].value;
        if !loss_value.is_scalar() {
            return Err(AutodiffError::NotScalar(loss_value.shape().to_vec()));
        }
        let lens: Vec<usize> = self.nodes.iter().map(|n| n.value.len()).collect();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            let Some(op) = &node.op else { continue };
            let Some(dy) = grads[id].take() else { continue };
            self.backprop(op, node, &dy, &lens, &mut grads);
            grads[id] = Some(dy);
        }
        Ok(Gradients { grads, lens })
    }

    fn backprop(&self, op: &Primitive, node: &Node, dy: &[f64], lens: &[usize], grads: &mut [Option<Vec<f64>>]) {
        let input = |i: usize| &self.nodes[node.inputs[i]].value;
        let y = &node.value;
        let target = |i: usize| node.inputs[i];
        match op {
            Primitive::MatMul => {
                let (a, b) = (input(0), input(1));
                let (m, k) = (a.shape[0], a.shape[1]);
                let n = b.shape[1];
                accumulate(&mut grads[target(0)], lens[target(0)], |g| gemm_nt(dy, b.data(), g, m, n, k));
                accumulate(&mut grads[target(1)], lens[target(1)], |g| gemm_tn(a.data(), dy, g, m, k, n));
            }
            Primitive::MatMulBt => {
                let (a, b) = (input(0), input(1));
                let (m, k) = (a.shape[0], a.shape[1]);
                let n = b.shape[0];
                accumulate(&mut grads[target(0)], lens[target(0)], |g| gemm_nn(dy, b.data(), g, m, n, k));
                accumulate(&mut grads[target(1)], lens[target(1)], |g| gemm_tn(dy, a.data(), g, m, n, k));
            }
            Primitive::Add => {
                for i in 0..2 {
                    accumulate(&mut grads[target(i)], lens[target(i)], |g| add_into(g, dy));
                }
            }
            Primitive::AddBias => {
                accumulate(&mut grads[target(0)], lens[target(0)], |g| add_into(g, dy));
                let n = input(1).len();
                accumulate(&mut grads[target(1)], n, |g| {
                    for (i, d) in dy.iter().enumerate() {
                        g[i % n] += d;
                    }
                });
            }
            Primitive::Mul => {
                let (a, b) = (input(0), input(1));
                accumulate(&mut grads[target(0)], lens[target(0)], |g| {
                    for ((gi, d), bi) in g.iter_mut().zip(dy).zip(b.data()) {
                        *gi += d * bi;
                    }
                });
                accumulate(&mut grads[target(1)], lens[target(1)], |g| {
                    for ((gi, d), ai) in g.iter_mut().zip(dy).zip(a.data()) {
                        *gi += d * ai;
                    }
                });
            }
            Primitive::Tanh => accumulate(&mut grads[target(0)], lens[target(0)], |g| {
                for ((gi, d), yi) in g.iter_mut().zip(dy).zip(y.data()) {
                    *gi += (1.0 - yi * yi) * d;
                }
            }),
            Primitive::Sigmoid => accumulate(&mut grads[target(0)], lens[target(0)], |g| {
                for ((gi, d), yi) in g.iter_mut().zip(dy).zip(y.data()) {
                    *gi += yi * (1.0 - yi) * d;
                }
            }),
            Primitive::Softmax | Primitive::MaskedSoftmax(_) => {
                let n = y.last_dim();
                accumulate(&mut grads[target(0)], lens[target(0)], |g| {
                    for r in 0..y.rows() {
                        let (yr, dr) = (y.row(r), &dy[r * n..(r + 1) * n]);
                        let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            g[r * n + j] += yr[j] * (dr[j] - dot);
                        }
                    }
                });
            }
            Primitive::EmbeddingLookup(indices) => {
                let e = input(0).shape[1];
                accumulate(&mut grads[target(0)], lens[target(0)], |g| {
                    for (row, &i) in indices.iter().enumerate() {
                        add_into(&mut g[i * e..(i + 1) * e], &dy[row * e..(row + 1) * e]);
                    }
                });
            }
            Primitive::Concat => {
                let width = y.last_dim();
                let mut offset = 0;
                for i in 0..node.inputs.len() {
                    let w = input(i).last_dim();
                    let rows = y.rows();
                    accumulate(&mut grads[target(i)], lens[target(i)], |g| {
                        for r in 0..rows {
                            add_into(&mut g[r * w..(r + 1) * w], &dy[r * width + offset..r * width + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Primitive::SliceLast { start, len } => {
                let n = input(0).last_dim();
                accumulate(&mut grads[target(0)], lens[target(0)], |g| {
                    for r in 0..y.rows() {
                        add_into(&mut g[r * n + start..r * n + start + len], &dy[r * len..(r + 1) * len]);
                    }
                });
            }
            Primitive::StackRows => {
                let mut offset = 0;
                for i in 0..node.inputs.len() {
                    let l = input(i).len();
                    accumulate(&mut grads[target(i)], l, |g| add_into(g, &dy[offset..offset + l]));
                    offset += l;
                }
            }
            Primitive::Sum => accumulate(&mut grads[target(0)], lens[target(0)], |g| {
                for gi in g.iter_mut() {
                    *gi += dy[0];
                }
            }),
            Primitive::MaskedCrossEntropy { targets, mask } => {
                let probs = input(0);
                let v = probs.shape[1];
                let count = mask.iter().filter(|&&m| m).count() as f64;
                accumulate(&mut grads[target(0)], lens[target(0)], |g| {
                    for (row, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                        let p = probs.data()[row * v + t];
                        if m && p >= PROB_FLOOR {
                            g[row * v + t] -= dy[0] / (p * count);
                        }
                    }
                });
            }
        }
    }
}

/// Central-difference gradient check of `f` at `params`.
///
/// `f` builds a scalar on the given tape from leaves holding `params`. Returns
/// the largest `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`
/// over every coordinate.
pub fn finite_difference_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    assert!(eps > 0.0, "eps must be positive");
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().cloned().map(|t| tape.leaf(t)).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out).data()[0];
        if v.is_finite() {
            Ok(v)
        } else {
            Err(AutodiffError::NonFinite { op: "finite_difference_check" })
        }
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().cloned().map(|t| tape.leaf(t)).collect();
    let loss = f(&mut tape, &vars)?;
    if !tape.value(loss).data()[0].is_finite() {
        return Err(AutodiffError::NonFinite { op: "finite_difference_check" });
    }
    let grads = tape.backward(loss)?;

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor> = params.to_vec();
    for (p, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        for i in 0..params[p].len() {
            let orig = params[p].data[i];
            probe[p].data[i] = orig + eps;
            let plus = eval(&probe)?;
            probe[p].data[i] = orig - eps;
            let minus = eval(&probe)?;
            probe[p].data[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[i];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn random(rng: &mut SplitMix64, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.0; 3]));
        let y = tape.softmax(x).unwrap();
        for &p in tape.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::new();
        let i2 = tape.leaf(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = Tensor::matrix(2, 3, vec![1.0, -2.0, 3.5, 0.25, 7.0, -1.0]).unwrap();
        let bv = tape.leaf(b.clone());
        let c = tape.matmul(i2, bv).unwrap();
        assert_eq!(tape.value(c), &b);
    }

    #[test]
    fn activations_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.0]));
        let s = tape.sigmoid(x).unwrap();
        let t = tape.tanh(x).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5]);
        assert_eq!(tape.value(t).data(), &[0.0]);
    }

    #[test]
    fn backward_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![3.0, 7.0]));
        let s = tape.sum(x).unwrap();
        assert_eq!(tape.backward(s).unwrap().wrt(x), vec![1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        assert_eq!(tape.backward(s).unwrap().wrt(x), vec![2.0, 4.0]);

        // x feeds two adds whose results are summed: d/dx = 2.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.5, -1.0]));
        let z = tape.leaf(Tensor::vector(vec![0.0, 0.0]));
        let a = tape.add(x, z).unwrap();
        let b = tape.add(x, z).unwrap();
        let c = tape.add(a, b).unwrap();
        let s = tape.sum(c).unwrap();
        assert_eq!(tape.backward(s).unwrap().wrt(x), vec![2.0, 2.0]);
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert_eq!(tape.backward(x).unwrap_err(), AutodiffError::NotScalar(vec![2]));
        assert_eq!(tape.backward(Var(9)).unwrap_err(), AutodiffError::NotOnTape(9));
    }

    #[test]
    fn shape_and_index_errors() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(AutodiffError::ShapeMismatch { .. })));
        let v = tape.leaf(Tensor::zeros(&[4]));
        assert!(matches!(tape.add(a, v), Err(AutodiffError::ShapeMismatch { .. })));
        assert!(matches!(
            tape.embedding(a, vec![2]),
            Err(AutodiffError::IndexOutOfRange { index: 2, bound: 2, .. })
        ));
        assert!(matches!(
            tape.masked_cross_entropy(a, vec![0, 0], vec![false, false]),
            Err(AutodiffError::AllMasked)
        ));
        assert!(matches!(
            tape.masked_softmax(a, vec![false; 3]),
            Err(AutodiffError::AllMasked)
        ));
    }

    #[test]
    fn non_finite_results_are_rejected() {
        let mut tape = Tape::new();
        let big = tape.leaf(Tensor::vector(vec![f64::MAX, f64::MAX]));
        assert_eq!(tape.add(big, big).unwrap_err(), AutodiffError::NonFinite { op: "add" });
    }

    #[test]
    fn cross_entropy_clamps_zero_probability() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap());
        let l = tape.masked_cross_entropy(p, vec![0], vec![true]).unwrap();
        assert!((tape.value(l).data()[0] - (-PROB_FLOOR.ln())).abs() < 1e-12);
    }

    #[test]
    fn unused_embedding_rows_get_zero_gradient() {
        let mut rng = SplitMix64::new(1);
        let mut tape = Tape::new();
        let table = tape.leaf(random(&mut rng, &[5, 3]));
        let rows = tape.embedding(table, vec![1, 3, 1]).unwrap();
        let sq = tape.mul(rows, rows).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap().wrt(table);
        for r in [0, 2, 4] {
            assert!(g[r * 3..(r + 1) * 3].iter().all(|&x| x == 0.0));
        }
        assert!(g[3..6].iter().any(|&x| x != 0.0));
    }

    #[test]
    fn backward_is_bitwise_deterministic() {
        let build = || {
            let mut rng = SplitMix64::new(5);
            let mut tape = Tape::new();
            let a = tape.leaf(random(&mut rng, &[3, 4]));
            let b = tape.leaf(random(&mut rng, &[4, 2]));
            let c = tape.matmul(a, b).unwrap();
            let t = tape.tanh(c).unwrap();
            let s = tape.softmax(t).unwrap();
            let l = tape.masked_cross_entropy(s, vec![0, 1, 1], vec![true, true, false]).unwrap();
            let g = tape.backward(l).unwrap();
            (g.wrt(a), g.wrt(b))
        };
        let (a1, b1) = build();
        let (a2, b2) = build();
        assert!(a1.iter().zip(&a2).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(b1.iter().zip(&b2).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn finite_difference_examples() {
        let sum_sq = |tape: &mut Tape, v: &[Var]| {
            let sq = tape.mul(v[0], v[0])?;
            tape.sum(sq)
        };
        let err = finite_difference_check(sum_sq, &[Tensor::vector(vec![1.0, 2.0])], 1e-5).unwrap();
        assert!(err < 1e-7, "{err}");

        let constant = |tape: &mut Tape, _: &[Var]| Ok(tape.leaf(Tensor::scalar(4.0)));
        let err = finite_difference_check(constant, &[Tensor::vector(vec![1.0, 2.0])], 1e-5).unwrap();
        assert_eq!(err, 0.0);

        // Two-step cross-entropy over a 3-symbol softmax.
        let mut rng = SplitMix64::new(2);
        let logits = random(&mut rng, &[2, 3]);
        let ce = |tape: &mut Tape, v: &[Var]| {
            let p = tape.softmax(v[0])?;
            tape.masked_cross_entropy(p, vec![2, 0], vec![true, true])
        };
        let err = finite_difference_check(ce, &[logits], 1e-5).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let mut rng = SplitMix64::new(8);
        for _ in 0..50 {
            let mut tape = Tape::new();
            let x = tape.leaf(random(&mut rng, &[3, 4]));
            let y = tape.softmax(x).unwrap();
            let y = tape.value(y);
            for r in 0..3 {
                let row = y.row(r);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
            }
        }
    }
}
