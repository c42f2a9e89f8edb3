//! Dense `f64` tensors with define-by-run reverse-mode differentiation.
//!
//! Every operation that touches a tensor with `requires_grad` records a node
//! holding its inputs; [`Tensor::backward`] walks that graph once in reverse
//! topological order. Gradients are accumulated only into leaf tensors, so the
//! caller decides when to reset them (see [`Tensor::zero_grad`]).
//!
//! Tensors are reference counted and their values never change after
//! construction. Optimizers produce fresh leaves instead of mutating in place.
//!
//! ```
//! use cbd::tensor::Tensor;
//!
//! let x = Tensor::param(vec![2.0], &[1]).unwrap();
//! let loss = x.mul(&x).unwrap().sum();
//! loss.backward().unwrap();
//! assert_eq!(x.grad().unwrap(), vec![4.0]);
//! ```

use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use thiserror::Error;

/// Default guard used by [`Tensor::l2_normalize`] callers.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("usage error: {0}")]
    Usage(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

fn shape_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Shape {
        op,
        detail: detail.into(),
    }
}

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

/// Shared handle to an immutable value plus its accumulated gradient.
#[derive(Clone)]
pub struct Tensor(Arc<Node>);

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<f64>>>,
    op: Option<Op>,
}

enum Op {
    MatMul(Tensor, Tensor),
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Scale(Tensor, f64),
    Neg(Tensor),
    Relu(Tensor),
    Exp(Tensor),
    Log(Tensor),
    Transpose(Tensor),
    AddRow(Tensor, Tensor),
    L2Normalize {
        input: Tensor,
        norms: Vec<f64>,
        eps: f64,
    },
    Softmax(Tensor),
    LogSoftmax(Tensor),
    Sum(Tensor),
    Mean(Tensor),
    SumRows(Tensor),
    ConcatCols(Vec<Tensor>),
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("data", &self.0.data)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl Tensor {
    fn build(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Option<Op>) -> Self {
        Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            grad: Mutex::new(None),
            op,
        }))
    }

    fn validate_shape(data: &[f64], shape: &[usize]) -> Result<()> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(shape_err("new", format!("invalid shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(shape_err(
                "new",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        Ok(())
    }

    /// A constant (non-differentiable) tensor.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        Self::validate_shape(&data, shape)?;
        Ok(Self::build(data, shape.to_vec(), false, None))
    }

    /// A leaf tensor that collects gradients.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        Self::validate_shape(&data, shape)?;
        Ok(Self::build(data, shape.to_vec(), true, None))
    }

    pub fn scalar(value: f64) -> Self {
        Self::build(vec![value], vec![1], false, None)
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let numel = shape.iter().product();
        Self::new(vec![0.0; numel], shape)
    }

    /// Result of an op: differentiable iff any input is.
    fn derived(data: Vec<f64>, shape: Vec<usize>, op: Op) -> Self {
        let requires_grad = op.inputs().iter().any(|t| t.requires_grad());
        let op = requires_grad.then_some(op);
        Self::build(data, shape, requires_grad, op)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(TensorError::Usage(format!(
                "item() on tensor with shape {:?}",
                self.shape()
            )));
        }
        Ok(self.0.data[0])
    }

    /// Rows and columns of a 2-D tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape() {
            [r, c] => Ok((*r, *c)),
            s => Err(shape_err(op, format!("expected a matrix, got shape {s:?}"))),
        }
    }

    /// Width of the trailing axis.
    pub fn last_dim(&self) -> usize {
        *self.0.shape.last().expect("shape is never empty")
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.lock().expect("grad lock poisoned").clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock poisoned") = None;
    }

    /// Same values, cut from the graph and never collecting gradients.
    pub fn detach(&self) -> Tensor {
        Self::build(self.0.data.clone(), self.0.shape.clone(), false, None)
    }

    /// Same values as a fresh gradient-collecting leaf.
    pub fn to_param(&self) -> Tensor {
        Self::build(self.0.data.clone(), self.0.shape.clone(), true, None)
    }

    /// Errors if any stored value is NaN or infinite.
    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.0.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(TensorError::NonFinite(context.to_string()))
        }
    }

    fn id(&self) -> u64 {
        self.0.id
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = other.dims2("matmul")?;
        if k != k2 {
            return Err(shape_err(
                "matmul",
                format!("inner dimensions differ: {m}x{k} * {k2}x{n}"),
            ));
        }
        let out = matmul_raw(self.data(), other.data(), m, k, n);
        Ok(Self::derived(
            out,
            vec![m, n],
            Op::MatMul(self.clone(), other.clone()),
        ))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2("transpose")?;
        let out = transpose_raw(self.data(), r, c);
        Ok(Self::derived(out, vec![c, r], Op::Transpose(self.clone())))
    }

    /// `self[b×n] + bias[n]`, the bias broadcast over rows.
    pub fn add_row(&self, bias: &Tensor) -> Result<Tensor> {
        let (rows, cols) = self.dims2("add_row")?;
        if bias.numel() != cols {
            return Err(shape_err(
                "add_row",
                format!("bias of {} values for {cols} columns", bias.numel()),
            ));
        }
        let b = bias.data();
        let mut out = self.data().to_vec();
        for row in out.chunks_mut(cols).take(rows) {
            row.iter_mut().zip(b).for_each(|(o, bv)| *o += bv);
        }
        Ok(Self::derived(
            out,
            vec![rows, cols],
            Op::AddRow(self.clone(), bias.clone()),
        ))
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Usage("concat_cols of nothing".into()))?;
        let (rows, _) = first.dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = p.dims2("concat_cols")?;
            if r != rows {
                return Err(shape_err(
                    "concat_cols",
                    format!("row counts differ: {rows} vs {r}"),
                ));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&p.data()[i * w..(i + 1) * w]);
            }
        }
        Ok(Self::derived(
            out,
            vec![rows, total],
            Op::ConcatCols(parts.to_vec()),
        ))
    }

    // ---- elementwise ----------------------------------------------------

    fn broadcast_binary(
        &self,
        other: &Tensor,
        op_name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Vec<f64>, Vec<usize>)> {
        let (a, b) = (self.data(), other.data());
        if self.shape() == other.shape() {
            Ok((
                a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect(),
                self.shape().to_vec(),
            ))
        } else if other.numel() == 1 {
            let y = b[0];
            Ok((a.iter().map(|x| f(*x, y)).collect(), self.shape().to_vec()))
        } else if self.numel() == 1 {
            let x = a[0];
            Ok((b.iter().map(|y| f(x, *y)).collect(), other.shape().to_vec()))
        } else {
            Err(shape_err(
                op_name,
                format!(
                    "shapes {:?} and {:?} do not broadcast",
                    self.shape(),
                    other.shape()
                ),
            ))
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let (out, shape) = self.broadcast_binary(other, "add", |x, y| x + y)?;
        Ok(Self::derived(
            out,
            shape,
            Op::Add(self.clone(), other.clone()),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        let (out, shape) = self.broadcast_binary(other, "sub", |x, y| x - y)?;
        Ok(Self::derived(
            out,
            shape,
            Op::Sub(self.clone(), other.clone()),
        ))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        let (out, shape) = self.broadcast_binary(other, "mul", |x, y| x * y)?;
        Ok(Self::derived(
            out,
            shape,
            Op::Mul(self.clone(), other.clone()),
        ))
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        let out = self.data().iter().map(|x| x * factor).collect();
        Self::derived(out, self.shape().to_vec(), Op::Scale(self.clone(), factor))
    }

    pub fn neg(&self) -> Tensor {
        let out = self.data().iter().map(|x| -x).collect();
        Self::derived(out, self.shape().to_vec(), Op::Neg(self.clone()))
    }

    pub fn relu(&self) -> Tensor {
        let out = self.data().iter().map(|x| x.max(0.0)).collect();
        Self::derived(out, self.shape().to_vec(), Op::Relu(self.clone()))
    }

    pub fn exp(&self) -> Tensor {
        let out = self.data().iter().map(|x| x.exp()).collect();
        Self::derived(out, self.shape().to_vec(), Op::Exp(self.clone()))
    }

    pub fn log(&self) -> Result<Tensor> {
        if let Some(bad) = self.data().iter().find(|x| **x <= 0.0 || x.is_nan()) {
            return Err(TensorError::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        let out = self.data().iter().map(|x| x.ln()).collect();
        Ok(Self::derived(
            out,
            self.shape().to_vec(),
            Op::Log(self.clone()),
        ))
    }

    // ---- row-wise -------------------------------------------------------

    /// Divides each trailing-axis vector by `max(‖v‖₂, eps)`.
    pub fn l2_normalize(&self, eps: f64) -> Tensor {
        let d = self.last_dim();
        let mut out = self.data().to_vec();
        let mut norms = Vec::with_capacity(self.numel() / d);
        for row in out.chunks_mut(d) {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            let denom = norm.max(eps);
            row.iter_mut().for_each(|x| *x /= denom);
            norms.push(norm);
        }
        Self::derived(
            out,
            self.shape().to_vec(),
            Op::L2Normalize {
                input: self.clone(),
                norms,
                eps,
            },
        )
    }

    /// Row-wise softmax over the trailing axis, max-shifted.
    pub fn softmax(&self) -> Tensor {
        let out = softmax_raw(self.data(), self.last_dim());
        Self::derived(out, self.shape().to_vec(), Op::Softmax(self.clone()))
    }

    pub fn log_softmax(&self) -> Tensor {
        let d = self.last_dim();
        let mut out = self.data().to_vec();
        for row in out.chunks_mut(d) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        Self::derived(out, self.shape().to_vec(), Op::LogSoftmax(self.clone()))
    }

    /// Sums the trailing axis: `[b×d] -> [b×1]`.
    pub fn sum_rows(&self) -> Tensor {
        let d = self.last_dim();
        let rows = self.numel() / d;
        let out = self.data().chunks(d).map(|r| r.iter().sum()).collect();
        Self::derived(out, vec![rows, 1], Op::SumRows(self.clone()))
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        Self::derived(vec![s], vec![1], Op::Sum(self.clone()))
    }

    pub fn mean(&self) -> Tensor {
        let s = self.data().iter().sum::<f64>() / self.numel() as f64;
        Self::derived(vec![s], vec![1], Op::Mean(self.clone()))
    }

    // ---- backward -------------------------------------------------------

    /// Nodes reachable through differentiable edges, parents before children.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        let mut stack = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(op) = &t.0.op {
                for input in op.inputs() {
                    if input.requires_grad() && !visited.contains(&input.id()) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }
        order
    }

    /// Back-propagates from a single-element tensor, adding `∂self/∂leaf`
    /// into the gradient buffer of every reachable differentiable leaf.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::Usage(format!(
                "backward() needs a scalar, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut pending: HashMap<u64, Vec<f64>> = HashMap::new();
        pending.insert(self.id(), vec![1.0]);
        for node in order.iter().rev() {
            let Some(g) = pending.remove(&node.id()) else {
                continue;
            };
            match &node.0.op {
                None => {
                    let mut slot = node.0.grad.lock().expect("grad lock poisoned");
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
                Some(op) => {
                    for (input, gi) in op.backward(node, &g) {
                        if !input.requires_grad() {
                            continue;
                        }
                        match pending.get_mut(&input.id()) {
                            Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, b)| *a += b),
                            None => {
                                pending.insert(input.id(), gi);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

impl Op {
    fn inputs(&self) -> Vec<&Tensor> {
        match self {
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::AddRow(a, b) => vec![a, b],
            Op::Scale(a, _)
            | Op::Neg(a)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Transpose(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumRows(a) => vec![a],
            Op::L2Normalize { input, .. } => vec![input],
            Op::ConcatCols(parts) => parts.iter().collect(),
        }
    }

    /// Gradient contributions to each input given the output gradient `g`.
    fn backward(&self, out: &Tensor, g: &[f64]) -> Vec<(Tensor, Vec<f64>)> {
        match self {
            Op::MatMul(a, b) => {
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                let mut res = Vec::with_capacity(2);
                if a.requires_grad() {
                    // g · bᵀ
                    let bt = transpose_raw(b.data(), k, n);
                    res.push((a.clone(), matmul_raw(g, &bt, m, n, k)));
                }
                if b.requires_grad() {
                    // aᵀ · g
                    let at = transpose_raw(a.data(), m, k);
                    res.push((b.clone(), matmul_raw(&at, g, k, m, n)));
                }
                res
            }
            Op::Add(a, b) => vec![
                (a.clone(), reduce_broadcast(g, a.numel())),
                (b.clone(), reduce_broadcast(g, b.numel())),
            ],
            Op::Sub(a, b) => {
                let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                vec![
                    (a.clone(), reduce_broadcast(g, a.numel())),
                    (b.clone(), reduce_broadcast(&neg, b.numel())),
                ]
            }
            Op::Mul(a, b) => {
                let ga: Vec<f64> = g
                    .iter()
                    .enumerate()
                    .map(|(i, gv)| gv * broadcast_at(b.data(), i))
                    .collect();
                let gb: Vec<f64> = g
                    .iter()
                    .enumerate()
                    .map(|(i, gv)| gv * broadcast_at(a.data(), i))
                    .collect();
                vec![
                    (a.clone(), reduce_broadcast(&ga, a.numel())),
                    (b.clone(), reduce_broadcast(&gb, b.numel())),
                ]
            }
            Op::Scale(a, f) => vec![(a.clone(), g.iter().map(|x| x * f).collect())],
            Op::Neg(a) => vec![(a.clone(), g.iter().map(|x| -x).collect())],
            Op::Relu(a) => vec![(
                a.clone(),
                g.iter()
                    .zip(a.data())
                    .map(|(gv, x)| if *x > 0.0 { *gv } else { 0.0 })
                    .collect(),
            )],
            Op::Exp(a) => vec![(
                a.clone(),
                g.iter().zip(out.data()).map(|(gv, y)| gv * y).collect(),
            )],
            Op::Log(a) => vec![(
                a.clone(),
                g.iter().zip(a.data()).map(|(gv, x)| gv / x).collect(),
            )],
            Op::Transpose(a) => {
                let (r, c) = (a.shape()[0], a.shape()[1]);
                // out is c×r; its transpose maps back to r×c
                vec![(a.clone(), transpose_raw(g, c, r))]
            }
            Op::AddRow(a, bias) => {
                let cols = bias.numel();
                let mut gb = vec![0.0; cols];
                for row in g.chunks(cols) {
                    gb.iter_mut().zip(row).for_each(|(acc, v)| *acc += v);
                }
                vec![(a.clone(), g.to_vec()), (bias.clone(), gb)]
            }
            Op::L2Normalize { input, norms, eps } => {
                let d = input.last_dim();
                let y = out.data();
                let mut gi = vec![0.0; g.len()];
                for (r, &norm) in norms.iter().enumerate() {
                    let span = r * d..(r + 1) * d;
                    let (gr, yr) = (&g[span.clone()], &y[span.clone()]);
                    let dst = &mut gi[span];
                    if norm >= *eps {
                        let proj: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((o, gv), yv) in dst.iter_mut().zip(gr).zip(yr) {
                            *o = (gv - yv * proj) / norm;
                        }
                    } else {
                        for (o, gv) in dst.iter_mut().zip(gr) {
                            *o = gv / eps;
                        }
                    }
                }
                vec![(input.clone(), gi)]
            }
            Op::Softmax(a) => {
                let d = a.last_dim();
                let mut gi = vec![0.0; g.len()];
                for ((dst, gr), yr) in gi.chunks_mut(d).zip(g.chunks(d)).zip(out.data().chunks(d)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((o, gv), yv) in dst.iter_mut().zip(gr).zip(yr) {
                        *o = yv * (gv - dot);
                    }
                }
                vec![(a.clone(), gi)]
            }
            Op::LogSoftmax(a) => {
                let d = a.last_dim();
                let mut gi = vec![0.0; g.len()];
                for ((dst, gr), yr) in gi.chunks_mut(d).zip(g.chunks(d)).zip(out.data().chunks(d)) {
                    let total: f64 = gr.iter().sum();
                    for ((o, gv), logp) in dst.iter_mut().zip(gr).zip(yr) {
                        *o = gv - logp.exp() * total;
                    }
                }
                vec![(a.clone(), gi)]
            }
            Op::Sum(a) => vec![(a.clone(), vec![g[0]; a.numel()])],
            Op::Mean(a) => vec![(a.clone(), vec![g[0] / a.numel() as f64; a.numel()])],
            Op::SumRows(a) => {
                let d = a.last_dim();
                let gi = g
                    .iter()
                    .flat_map(|gv| std::iter::repeat_n(*gv, d))
                    .collect();
                vec![(a.clone(), gi)]
            }
            Op::ConcatCols(parts) => {
                let total = out.shape()[1];
                let rows = out.shape()[0];
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for p in parts {
                    let w = p.shape()[1];
                    let mut gp = Vec::with_capacity(rows * w);
                    for i in 0..rows {
                        gp.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                    }
                    offset += w;
                    res.push((p.clone(), gp));
                }
                res
            }
        }
    }
}

fn broadcast_at(data: &[f64], i: usize) -> f64 {
    if data.len() == 1 {
        data[0]
    } else {
        data[i]
    }
}

/// Folds a full-size gradient back onto a (possibly scalar) operand.
fn reduce_broadcast(g: &[f64], numel: usize) -> Vec<f64> {
    if numel == g.len() {
        g.to_vec()
    } else {
        vec![g.iter().sum()]
    }
}

/// Row-major `[m×k] · [k×n]`.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let dst = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            dst.iter_mut().zip(brow).for_each(|(o, bv)| *o += av * bv);
        }
    }
    out
}

pub(crate) fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Max-shifted softmax over consecutive chunks of width `d`.
pub fn softmax_raw(data: &[f64], d: usize) -> Vec<f64> {
    let mut out = data.to_vec();
    for row in out.chunks_mut(d) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            total += *x;
        }
        row.iter_mut().for_each(|x| *x /= total);
    }
    out
}

/// Outcome of [`gradcheck`]: the worst mismatch between autodiff and
/// central finite differences.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub entries: usize,
}

/// Compares autodiff gradients of a scalar function against central finite
/// differences, evaluated with forward passes only.
///
/// The relative error of one entry is `|a − n| / max(|a|, |n|, 1e-3)`; the
/// floor keeps entries whose true gradient is zero from amplifying rounding
/// noise.
pub fn gradcheck<F, E>(inputs: &[Tensor], f: F, step: f64) -> std::result::Result<GradCheck, E>
where
    F: Fn(&[Tensor]) -> std::result::Result<Tensor, E>,
    E: From<TensorError>,
{
    let leaves: Vec<Tensor> = inputs.iter().map(Tensor::to_param).collect();
    let out = f(&leaves)?;
    out.backward()?;

    let mut worst: f64 = 0.0;
    let mut entries = 0;
    for (idx, leaf) in leaves.iter().enumerate() {
        let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; leaf.numel()]);
        for e in 0..leaf.numel() {
            let eval = |delta: f64| -> std::result::Result<f64, E> {
                let mut data = leaf.data().to_vec();
                data[e] += delta;
                let mut shifted: Vec<Tensor> = leaves.iter().map(Tensor::detach).collect();
                shifted[idx] = Tensor::new(data, leaf.shape())?;
                Ok(f(&shifted)?.item()?)
            };
            let numeric = (eval(step)? - eval(-step)?) / (2.0 * step);
            let a = analytic[e];
            let denom = a.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max((a - numeric).abs() / denom);
            entries += 1;
        }
    }
    Ok(GradCheck {
        max_rel_error: worst,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), shape).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn matmul_identity_and_basis() {
        let eye = Tensor::new(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        let m = Tensor::new(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        assert_eq!(eye.matmul(&m).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);

        let row = Tensor::new(vec![1.0, 0.0], &[1, 2]).unwrap();
        let col = Tensor::new(vec![0.0, 5.0], &[2, 1]).unwrap();
        let out = row.matmul(&col).unwrap();
        assert_eq!(out.shape(), &[1, 1]);
        assert_eq!(out.data(), &[0.0]);
    }

    #[test]
    fn matmul_rejects_mismatched_inner_dims() {
        let a = Tensor::zeros(&[2, 3]).unwrap();
        let b = Tensor::zeros(&[2, 3]).unwrap();
        assert!(matches!(a.matmul(&b), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&[3, 4], &mut rng);
        let b = random(&[4, 2], &mut rng);
        let w = random(&[3, 2], &mut rng);
        let check =
            gradcheck::<_, TensorError>(&[a, b], |t| Ok(t[0].matmul(&t[1])?.mul(&w)?.sum()), 1e-5)
                .unwrap();
        assert!(check.max_rel_error < 1e-5, "{check:?}");
    }

    #[test]
    fn elementwise_values() {
        let x = Tensor::new(vec![-1.0, 0.0, 2.0], &[3]).unwrap();
        assert_eq!(x.relu().data(), &[0.0, 0.0, 2.0]);
        assert_eq!(Tensor::scalar(0.0).exp().data(), &[1.0]);
        assert_eq!(x.neg().data(), &[1.0, -0.0, -2.0]);
        assert_eq!(x.scale(2.0).data(), &[-2.0, 0.0, 4.0]);
        let s = Tensor::scalar(10.0);
        assert_eq!(x.add(&s).unwrap().data(), &[9.0, 10.0, 12.0]);
        assert_eq!(s.sub(&x).unwrap().data(), &[11.0, 10.0, 8.0]);
    }

    #[test]
    fn log_of_non_positive_is_a_domain_error() {
        let x = Tensor::new(vec![1.0, 0.0], &[2]).unwrap();
        assert!(matches!(x.log(), Err(TensorError::Domain { .. })));
        let y = Tensor::new(vec![-3.0], &[1]).unwrap();
        assert!(y.log().is_err());
    }

    #[test]
    fn mismatched_shapes_do_not_broadcast() {
        let a = Tensor::zeros(&[2, 3]).unwrap();
        let b = Tensor::zeros(&[3, 2]).unwrap();
        assert!(a.add(&b).is_err());
        assert!(a.mul(&b).is_err());
    }

    #[test]
    fn mul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random(&[2, 3], &mut rng);
        let b = random(&[2, 3], &mut rng);
        let check =
            gradcheck::<_, TensorError>(&[a, b], |t| Ok(t[0].mul(&t[1])?.sum()), 1e-5).unwrap();
        assert!(check.max_rel_error < 1e-5, "{check:?}");
    }

    #[test]
    fn l2_normalize_values() {
        let v = Tensor::new(vec![3.0, 4.0], &[1, 2]).unwrap();
        assert!(close(v.l2_normalize(NORM_EPS).data(), &[0.6, 0.8], 1e-15));
        let z = Tensor::new(vec![0.0, 0.0], &[1, 2]).unwrap();
        assert_eq!(z.l2_normalize(1e-12).data(), &[0.0, 0.0]);
    }

    #[test]
    fn l2_normalize_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = random(&[1, 8], &mut rng);
        let w = random(&[1, 8], &mut rng);
        let check = gradcheck::<_, TensorError>(
            &[v],
            |t| Ok(t[0].l2_normalize(NORM_EPS).mul(&w)?.sum()),
            1e-5,
        )
        .unwrap();
        assert!(check.max_rel_error < 1e-5, "{check:?}");
    }

    #[test]
    fn softmax_values() {
        let u = Tensor::new(vec![0.0, 0.0, 0.0], &[1, 3]).unwrap().softmax();
        assert!(close(u.data(), &[1.0 / 3.0; 3], 1e-15));
        let s = Tensor::new(vec![1000.0, 0.0], &[1, 2]).unwrap().softmax();
        assert!(close(s.data(), &[1.0, 0.0], 1e-12));
        let p = Tensor::new(vec![1.0, 2.0], &[1, 2]).unwrap().softmax();
        // e/(e+e²), e²/(e+e²)
        assert!(close(p.data(), &[0.26894, 0.73106], 1e-5));
    }

    #[test]
    fn backward_on_sum_and_square() {
        let x = Tensor::param(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        x.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);

        let y = Tensor::param(vec![2.0], &[1]).unwrap();
        y.mul(&y).unwrap().sum().backward().unwrap();
        assert_eq!(y.grad().unwrap(), vec![4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        assert!(matches!(x.relu().backward(), Err(TensorError::Usage(_))));
    }

    #[test]
    fn backward_twice_accumulates() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(&[2, 3], &mut rng).to_param();
        let loss = x.mul(&x).unwrap().exp().sum();
        loss.backward().unwrap();
        let once = x.grad().unwrap();
        loss.backward().unwrap();
        let twice = x.grad().unwrap();
        for (a, b) in once.iter().zip(&twice) {
            assert_eq!(2.0 * a, *b);
        }
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn constants_never_receive_gradients() {
        let c = Tensor::new(vec![1.0, 2.0], &[2]).unwrap();
        let p = Tensor::param(vec![3.0, 4.0], &[2]).unwrap();
        p.mul(&c).unwrap().sum().backward().unwrap();
        assert!(c.grad().is_none());
        assert_eq!(p.grad().unwrap(), vec![1.0, 2.0]);
        let d = p.detach();
        assert!(!d.requires_grad());
    }

    #[test]
    fn shared_subexpression_is_visited_once() {
        // y = a + a, where a = x * 3: dy/dx = 6
        let x = Tensor::param(vec![1.5], &[1]).unwrap();
        let a = x.scale(3.0);
        a.add(&a).unwrap().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn concat_cols_layout_and_gradient() {
        let a = Tensor::new(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let b = Tensor::new(vec![5.0, 6.0], &[2, 1]).unwrap();
        let c = Tensor::concat_cols(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(c.shape(), &[2, 3]);
        assert_eq!(c.data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let w = Tensor::new(vec![0.3, -0.2, 0.1, 0.4, 0.25, -0.3], &[2, 3]).unwrap();
        let check = gradcheck::<_, TensorError>(
            &[a, b],
            |t| Ok(Tensor::concat_cols(t)?.mul(&w)?.exp().sum()),
            1e-5,
        )
        .unwrap();
        assert!(check.max_rel_error < 1e-6, "{check:?}");
    }

    #[test]
    fn check_finite_flags_nan() {
        let t = Tensor::new(vec![1.0, f64::NAN], &[2]).unwrap();
        assert!(matches!(
            t.check_finite("t"),
            Err(TensorError::NonFinite(_))
        ));
        assert!(Tensor::scalar(1.0).check_finite("ok").is_ok());
    }

    #[test]
    fn new_validates_shape() {
        assert!(Tensor::new(vec![1.0; 5], &[2, 3]).is_err());
        assert!(Tensor::new(vec![], &[0]).is_err());
    }
}
