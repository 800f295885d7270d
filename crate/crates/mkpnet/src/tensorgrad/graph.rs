//! Tape-based reverse-mode autodiff over dense f32 tensors.
//!
//! A [`Graph`] records every primitive application in creation order, which
//! is already a topological order: inputs always exist before the op that
//! consumes them. `backward` walks the tape in reverse exactly once,
//! accumulating gradients additively. The tape can also be re-executed in
//! f64 ([`Graph::replay_f64`]) so finite-difference checks are not drowned
//! by single-precision rounding.

use super::kernels;
use crate::error::{Error, Result};

pub const LN_EPS: f32 = 1e-5;

/// Dense row-major tensor value.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) || numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                detail: format!("shape {:?} does not hold {} values", shape, data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(v: f32) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel] }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Size of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().unwrap()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(TensorId, TensorId),
    /// `a * b^T`
    MatMulNT(TensorId, TensorId),
    Transpose(TensorId),
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, f32),
    AddConst(TensorId, f32),
    Concat(TensorId, TensorId),
    Reshape(TensorId),
    SliceLast(TensorId, usize, usize),
    Row(TensorId, usize),
    Tanh(TensorId),
    Exp(TensorId),
    Log(TensorId),
    Clamp(TensorId, f32, f32),
    Softmax(TensorId),
    Sum(TensorId),
    Mean(TensorId),
    Embedding(TensorId, Vec<usize>),
    LayerNorm(TensorId, TensorId, TensorId),
    CrossEntropy(TensorId, usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulNT(..) => "matmul_nt",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "multiply",
            Op::Scale(..) => "scale",
            Op::AddConst(..) => "add_const",
            Op::Concat(..) => "concat",
            Op::Reshape(..) => "reshape",
            Op::SliceLast(..) => "slice_last",
            Op::Row(..) => "row",
            Op::Tanh(..) => "tanh",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Clamp(..) => "clamp",
            Op::Softmax(..) => "softmax",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Embedding(..) => "embedding_lookup",
            Op::LayerNorm(..) => "layer_norm",
            Op::CrossEntropy(..) => "cross_entropy",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f32>>,
    requires_grad: bool,
    op: Op,
}

/// Records primitive applications and runs forward/backward passes.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, detail: String) -> Error {
    Error::ShapeMismatch { op, detail }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: TensorId) -> f32 {
        self.nodes[id.0].value.data[0]
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f32]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<TensorId> {
        if value.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "leaf" });
        }
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Leaf that never tracks gradients.
    pub fn constant(&mut self, value: Tensor) -> Result<TensorId> {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Result<TensorId> {
        if value.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: op.name() });
        }
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Ok(TensorId(self.nodes.len() - 1))
    }

    fn rg2(&self, a: TensorId, b: TensorId) -> bool {
        self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad
    }

    // ---- primitives ------------------------------------------------------

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.shape[1] != tb.shape[0] {
            return Err(mismatch("matmul", format!("{:?} x {:?}", ta.shape, tb.shape)));
        }
        let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        let out = kernels::matmul(&ta.data, &tb.data, m, k, n);
        let rg = self.rg2(a, b);
        self.push(Tensor { shape: vec![m, n], data: out }, rg, Op::MatMul(a, b))
    }

    /// `a [m,k] * b[n,k]^T -> [m,n]`.
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.shape[1] != tb.shape[1] {
            return Err(mismatch("matmul_nt", format!("{:?} x {:?}^T", ta.shape, tb.shape)));
        }
        let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[0]);
        let out = kernels::matmul_nt(&ta.data, &tb.data, m, k, n);
        let rg = self.rg2(a, b);
        self.push(Tensor { shape: vec![m, n], data: out }, rg, Op::MatMulNT(a, b))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let ta = &self.nodes[a.0].value;
        if ta.shape.len() != 2 {
            return Err(mismatch("transpose", format!("{:?}", ta.shape)));
        }
        let (r, c) = (ta.shape[0], ta.shape[1]);
        let out = kernels::transpose(&ta.data, r, c);
        let rg = self.nodes[a.0].requires_grad;
        self.push(Tensor { shape: vec![c, r], data: out }, rg, Op::Transpose(a))
    }

    fn bcast_check(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<()> {
        let (sa, sb) = (&self.nodes[a.0].value.shape, &self.nodes[b.0].value.shape);
        let ok = sa.len() >= sb.len() && sa[sa.len() - sb.len()..] == sb[..];
        if !ok {
            return Err(mismatch(op, format!("{:?} vs {:?}", sa, sb)));
        }
        Ok(())
    }

    fn binop(
        &mut self,
        name: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f32, f32) -> f32,
        op: Op,
    ) -> Result<TensorId> {
        self.bcast_check(name, a, b)?;
        let out = kernels::bcast_binop(&self.nodes[a.0].value.data, &self.nodes[b.0].value.data, f);
        let shape = self.nodes[a.0].value.shape.clone();
        let rg = self.rg2(a, b);
        self.push(Tensor { shape, data: out }, rg, op)
    }

    /// Elementwise add; `b` may broadcast over leading dims of `a`.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binop("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binop("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binop("multiply", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: TensorId, c: f32) -> Result<TensorId> {
        let t = &self.nodes[a.0].value;
        let out = Tensor { shape: t.shape.clone(), data: t.data.iter().map(|v| v * c).collect() };
        let rg = self.nodes[a.0].requires_grad;
        self.push(out, rg, Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: TensorId, c: f32) -> Result<TensorId> {
        let t = &self.nodes[a.0].value;
        let out = Tensor { shape: t.shape.clone(), data: t.data.iter().map(|v| v + c).collect() };
        let rg = self.nodes[a.0].requires_grad;
        self.push(out, rg, Op::AddConst(a, c))
    }

    /// Concatenation along the last axis; leading dims must match.
    pub fn concat(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (&ta.shape, &tb.shape);
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(mismatch("concat", format!("{:?} ++ {:?}", sa, sb)));
        }
        let (p, q) = (ta.last_dim(), tb.last_dim());
        let rows = ta.numel() / p;
        let mut data = Vec::with_capacity(ta.numel() + tb.numel());
        for r in 0..rows {
            data.extend_from_slice(&ta.data[r * p..(r + 1) * p]);
            data.extend_from_slice(&tb.data[r * q..(r + 1) * q]);
        }
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = p + q;
        let rg = self.rg2(a, b);
        self.push(Tensor { shape, data }, rg, Op::Concat(a, b))
    }

    /// Same data, new shape; numel must be unchanged.
    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let t = &self.nodes[a.0].value;
        if shape.iter().product::<usize>() != t.numel() {
            return Err(mismatch("reshape", format!("{:?} -> {:?}", t.shape, shape)));
        }
        let data = t.data.clone();
        let rg = self.nodes[a.0].requires_grad;
        self.push(Tensor { shape, data }, rg, Op::Reshape(a))
    }

    /// Takes `[start, start+len)` along the last axis.
    pub fn slice_last(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let ta = &self.nodes[a.0].value;
        let n = ta.last_dim();
        if start + len > n || len == 0 {
            return Err(mismatch("slice_last", format!("[{start}, {}) of last dim {n}", start + len)));
        }
        let rows = ta.numel() / n;
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&ta.data[r * n + start..r * n + start + len]);
        }
        let mut shape = ta.shape.clone();
        *shape.last_mut().unwrap() = len;
        let rg = self.nodes[a.0].requires_grad;
        self.push(Tensor { shape, data }, rg, Op::SliceLast(a, start, len))
    }

    /// Row `i` along the first axis; drops that axis.
    pub fn row(&mut self, a: TensorId, i: usize) -> Result<TensorId> {
        let ta = &self.nodes[a.0].value;
        if ta.shape.len() < 2 || i >= ta.shape[0] {
            return Err(mismatch("row", format!("row {i} of {:?}", ta.shape)));
        }
        let chunk = ta.numel() / ta.shape[0];
        let data = ta.data[i * chunk..(i + 1) * chunk].to_vec();
        let shape = ta.shape[1..].to_vec();
        let rg = self.nodes[a.0].requires_grad;
        self.push(Tensor { shape, data }, rg, Op::Row(a, i))
    }

    fn unary(
        &mut self,
        a: TensorId,
        f: impl Fn(f32) -> f32,
        op: Op,
    ) -> Result<TensorId> {
        let t = &self.nodes[a.0].value;
        let out = Tensor { shape: t.shape.clone(), data: t.data.iter().map(|&v| f(v)).collect() };
        let rg = self.nodes[a.0].requires_grad;
        self.push(out, rg, op)
    }

    pub fn tanh(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary(a, f32::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary(a, f32::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary(a, f32::ln, Op::Log(a))
    }

    pub fn clamp(&mut self, a: TensorId, lo: f32, hi: f32) -> Result<TensorId> {
        self.unary(a, |v| v.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: TensorId) -> Result<TensorId> {
        let t = &self.nodes[a.0].value;
        let n = t.last_dim();
        let out = kernels::softmax_last(&t.data, n);
        let shape = t.shape.clone();
        let rg = self.nodes[a.0].requires_grad;
        self.push(Tensor { shape, data: out }, rg, Op::Softmax(a))
    }

    pub fn sum(&mut self, a: TensorId) -> Result<TensorId> {
        let s: f32 = self.nodes[a.0].value.data.iter().sum();
        let rg = self.nodes[a.0].requires_grad;
        self.push(Tensor::scalar(s), rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: TensorId) -> Result<TensorId> {
        let t = &self.nodes[a.0].value;
        let s: f32 = t.data.iter().sum::<f32>() / t.numel() as f32;
        let rg = self.nodes[a.0].requires_grad;
        self.push(Tensor::scalar(s), rg, Op::Mean(a))
    }

    /// Gathers rows of an embedding `table [V, d]` at `ids`, giving `[len, d]`.
    pub fn embedding(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId> {
        let t = &self.nodes[table.0].value;
        if t.shape.len() != 2 {
            return Err(mismatch("embedding_lookup", format!("table {:?}", t.shape)));
        }
        let (v, d) = (t.shape[0], t.shape[1]);
        if ids.is_empty() || ids.iter().any(|&id| id >= v) {
            return Err(mismatch("embedding_lookup", format!("ids {:?} for table rows {v}", ids)));
        }
        let out = kernels::embedding(&t.data, d, ids);
        let rg = self.nodes[table.0].requires_grad;
        self.push(
            Tensor { shape: vec![ids.len(), d], data: out },
            rg,
            Op::Embedding(table, ids.to_vec()),
        )
    }

    /// Layer normalization over the last axis with affine `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: TensorId, gamma: TensorId, beta: TensorId) -> Result<TensorId> {
        let (tx, tg, tb) = (
            &self.nodes[x.0].value,
            &self.nodes[gamma.0].value,
            &self.nodes[beta.0].value,
        );
        let n = tx.last_dim();
        if tg.numel() != n || tb.numel() != n {
            return Err(mismatch(
                "layer_norm",
                format!("x {:?}, gamma {:?}, beta {:?}", tx.shape, tg.shape, tb.shape),
            ));
        }
        let out = kernels::layer_norm(&tx.data, &tg.data, &tb.data, n, LN_EPS);
        let shape = tx.shape.clone();
        let rg = self.nodes[x.0].requires_grad
            || self.nodes[gamma.0].requires_grad
            || self.nodes[beta.0].requires_grad;
        self.push(Tensor { shape, data: out }, rg, Op::LayerNorm(x, gamma, beta))
    }

    /// Softmax cross-entropy of rank-1 `logits` against a class index.
    pub fn cross_entropy(&mut self, logits: TensorId, target: usize) -> Result<TensorId> {
        let t = &self.nodes[logits.0].value;
        if t.shape.len() != 1 || target >= t.numel() {
            return Err(mismatch(
                "cross_entropy",
                format!("logits {:?}, target {target}", t.shape),
            ));
        }
        let loss = kernels::cross_entropy(&t.data, target);
        let rg = self.nodes[logits.0].requires_grad;
        self.push(Tensor::scalar(loss), rg, Op::CrossEntropy(logits, target))
    }

    // ---- composites ------------------------------------------------------

    /// `x*w + b` where `x` is `[m, k]` or `[k]`, `w` is `[k, n]`, `b` is `[n]`.
    pub fn affine(&mut self, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId> {
        let was_vec = self.value(x).shape.len() == 1;
        let x2 = if was_vec {
            let d = self.value(x).numel();
            self.reshape(x, vec![1, d])?
        } else {
            x
        };
        let y = self.matmul(x2, w)?;
        let y = self.add(y, b)?;
        if was_vec {
            let n = self.value(y).last_dim();
            self.reshape(y, vec![n])
        } else {
            Ok(y)
        }
    }

    /// Scaled dot-product attention for one head.
    ///
    /// `q`,`k`,`v` are `[t, dh]`; `mask_bias` is an additive `[t, t]` constant
    /// (0 for visible keys, large negative for masked ones).
    pub fn attention(
        &mut self,
        q: TensorId,
        k: TensorId,
        v: TensorId,
        mask_bias: TensorId,
    ) -> Result<TensorId> {
        let dh = self.value(q).last_dim();
        let scores = self.matmul_nt(q, k)?;
        let scaled = self.scale(scores, 1.0 / (dh as f32).sqrt())?;
        let masked = self.add(scaled, mask_bias)?;
        let att = self.softmax(masked)?;
        self.matmul(att, v)
    }

    // ---- backward --------------------------------------------------------

    /// Populates gradients of every `requires_grad` node reachable from a
    /// scalar `loss`. Gradients accumulate additively across uses.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Invalid(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape
            )));
        }
        if matches!(self.nodes[loss.0].op, Op::Leaf) && !self.nodes[loss.0].requires_grad {
            return Err(Error::Invalid("backward on a graph-free tensor".into()));
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad || self.nodes[idx].grad.is_none() {
                continue;
            }
            let op = self.nodes[idx].op.clone();
            let dy = self.nodes[idx].grad.clone().unwrap();
            self.backprop_node(idx, &op, &dy);
        }
        Ok(())
    }

    fn acc(&mut self, id: TensorId, contrib: &[f32]) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let n = self.nodes[id.0].value.numel();
        let g = self.nodes[id.0].grad.get_or_insert_with(|| vec![0.0; n]);
        for (gi, &c) in g.iter_mut().zip(contrib) {
            *gi += c;
        }
    }

    fn backprop_node(&mut self, idx: usize, op: &Op, dy: &[f32]) {
        match *op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let ta = &self.nodes[a.0].value;
                let tb = &self.nodes[b.0].value;
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                if self.nodes[a.0].requires_grad {
                    let da = kernels::matmul_nt(dy, &self.nodes[b.0].value.data, m, n, k);
                    self.acc(a, &da);
                }
                if self.nodes[b.0].requires_grad {
                    let at = kernels::transpose(&self.nodes[a.0].value.data, m, k);
                    let db = kernels::matmul(&at, dy, k, m, n);
                    self.acc(b, &db);
                }
            }
            Op::MatMulNT(a, b) => {
                // c = a * b^T, a [m,k], b [n,k]
                let ta = &self.nodes[a.0].value;
                let tb = &self.nodes[b.0].value;
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[0]);
                if self.nodes[a.0].requires_grad {
                    let da = kernels::matmul(dy, &self.nodes[b.0].value.data, m, n, k);
                    self.acc(a, &da);
                }
                if self.nodes[b.0].requires_grad {
                    let dyt = kernels::transpose(dy, m, n);
                    let db = kernels::matmul(&dyt, &self.nodes[a.0].value.data, n, m, k);
                    self.acc(b, &db);
                }
            }
            Op::Transpose(a) => {
                let s = &self.nodes[idx].value.shape;
                let da = kernels::transpose(dy, s[0], s[1]);
                self.acc(a, &da);
            }
            Op::Add(a, b) => {
                self.acc(a, dy);
                self.acc_reduced(b, dy, 1.0);
            }
            Op::Sub(a, b) => {
                self.acc(a, dy);
                self.acc_reduced(b, dy, -1.0);
            }
            Op::Mul(a, b) => {
                if self.nodes[a.0].requires_grad {
                    let bd = &self.nodes[b.0].value.data;
                    let da: Vec<f32> =
                        dy.iter().enumerate().map(|(i, &g)| g * bd[i % bd.len()]).collect();
                    self.acc(a, &da);
                }
                if self.nodes[b.0].requires_grad {
                    let ad = self.nodes[a.0].value.data.clone();
                    let bn = self.nodes[b.0].value.numel();
                    let mut db = vec![0.0; bn];
                    for (i, &g) in dy.iter().enumerate() {
                        db[i % bn] += g * ad[i];
                    }
                    self.acc(b, &db);
                }
            }
            Op::Scale(a, c) => {
                let da: Vec<f32> = dy.iter().map(|&g| g * c).collect();
                self.acc(a, &da);
            }
            Op::AddConst(a, _) => self.acc(a, dy),
            Op::Concat(a, b) => {
                let p = self.nodes[a.0].value.last_dim();
                let q = self.nodes[b.0].value.last_dim();
                let rows = self.nodes[a.0].value.numel() / p;
                let mut da = Vec::with_capacity(rows * p);
                let mut db = Vec::with_capacity(rows * q);
                for r in 0..rows {
                    da.extend_from_slice(&dy[r * (p + q)..r * (p + q) + p]);
                    db.extend_from_slice(&dy[r * (p + q) + p..(r + 1) * (p + q)]);
                }
                self.acc(a, &da);
                self.acc(b, &db);
            }
            Op::SliceLast(a, start, len) => {
                let n = self.nodes[a.0].value.last_dim();
                let rows = self.nodes[a.0].value.numel() / n;
                let mut da = vec![0.0; rows * n];
                for r in 0..rows {
                    da[r * n + start..r * n + start + len]
                        .copy_from_slice(&dy[r * len..(r + 1) * len]);
                }
                self.acc(a, &da);
            }
            Op::Reshape(a) => self.acc(a, dy),
            Op::Row(a, i) => {
                let total = self.nodes[a.0].value.numel();
                let chunk = total / self.nodes[a.0].value.shape[0];
                let mut da = vec![0.0; total];
                da[i * chunk..(i + 1) * chunk].copy_from_slice(dy);
                self.acc(a, &da);
            }
            Op::Tanh(a) => {
                let y = &self.nodes[idx].value.data;
                let da: Vec<f32> = dy.iter().zip(y).map(|(&g, &t)| g * (1.0 - t * t)).collect();
                self.acc(a, &da);
            }
            Op::Exp(a) => {
                let y = &self.nodes[idx].value.data;
                let da: Vec<f32> = dy.iter().zip(y).map(|(&g, &e)| g * e).collect();
                self.acc(a, &da);
            }
            Op::Log(a) => {
                let x = &self.nodes[a.0].value.data;
                let da: Vec<f32> = dy.iter().zip(x).map(|(&g, &v)| g / v).collect();
                self.acc(a, &da);
            }
            Op::Clamp(a, lo, hi) => {
                let x = &self.nodes[a.0].value.data;
                let da: Vec<f32> = dy
                    .iter()
                    .zip(x)
                    .map(|(&g, &v)| if v > lo && v < hi { g } else { 0.0 })
                    .collect();
                self.acc(a, &da);
            }
            Op::Softmax(a) => {
                let y = &self.nodes[idx].value.data;
                let n = self.nodes[idx].value.last_dim();
                let mut da = vec![0.0; y.len()];
                for r in 0..y.len() / n {
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &dy[r * n..(r + 1) * n];
                    let dot: f32 = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                    for j in 0..n {
                        da[r * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.acc(a, &da);
            }
            Op::Sum(a) => {
                let da = vec![dy[0]; self.nodes[a.0].value.numel()];
                self.acc(a, &da);
            }
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.numel();
                let da = vec![dy[0] / n as f32; n];
                self.acc(a, &da);
            }
            Op::Embedding(table, ref ids) => {
                if self.nodes[table.0].requires_grad {
                    let (v, d) = {
                        let s = &self.nodes[table.0].value.shape;
                        (s[0], s[1])
                    };
                    let mut dt = vec![0.0; v * d];
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[id * d + j] += dy[r * d + j];
                        }
                    }
                    self.acc(table, &dt);
                }
            }
            Op::LayerNorm(x, gamma, beta) => {
                let n = self.nodes[x.0].value.last_dim();
                let xd = self.nodes[x.0].value.data.clone();
                let gd = self.nodes[gamma.0].value.data.clone();
                let rows = xd.len() / n;
                let mut dxall = vec![0.0; xd.len()];
                let mut dgamma = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                for r in 0..rows {
                    let xr = &xd[r * n..(r + 1) * n];
                    let gr = &dy[r * n..(r + 1) * n];
                    let mean = xr.iter().sum::<f32>() / n as f32;
                    let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / n as f32;
                    let inv = 1.0 / (var + LN_EPS).sqrt();
                    let xhat: Vec<f32> = xr.iter().map(|&v| (v - mean) * inv).collect();
                    for j in 0..n {
                        dgamma[j] += gr[j] * xhat[j];
                        dbeta[j] += gr[j];
                    }
                    let g: Vec<f32> = (0..n).map(|j| gr[j] * gd[j]).collect();
                    let mg = g.iter().sum::<f32>() / n as f32;
                    let mgx = g.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<f32>() / n as f32;
                    for j in 0..n {
                        dxall[r * n + j] = inv * (g[j] - mg - xhat[j] * mgx);
                    }
                }
                self.acc(x, &dxall);
                self.acc(gamma, &dgamma);
                self.acc(beta, &dbeta);
            }
            Op::CrossEntropy(logits, target) => {
                if self.nodes[logits.0].requires_grad {
                    let ld = &self.nodes[logits.0].value.data;
                    let n = ld.len();
                    let sm = kernels::softmax_last(ld, n);
                    let da: Vec<f32> = (0..n)
                        .map(|j| dy[0] * (sm[j] - if j == target { 1.0 } else { 0.0 }))
                        .collect();
                    self.acc(logits, &da);
                }
            }
        }
    }

    /// Gradient accumulation for the broadcast side of add/sub/mul.
    fn acc_reduced(&mut self, b: TensorId, dy: &[f32], sign: f32) {
        if !self.nodes[b.0].requires_grad {
            return;
        }
        let bn = self.nodes[b.0].value.numel();
        if bn == dy.len() {
            if sign == 1.0 {
                self.acc(b, dy);
            } else {
                let d: Vec<f32> = dy.iter().map(|&g| g * sign).collect();
                self.acc(b, &d);
            }
            return;
        }
        let mut db = vec![0.0; bn];
        for (i, &g) in dy.iter().enumerate() {
            db[i % bn] += g * sign;
        }
        self.acc(b, &db);
    }

    // ---- f64 replay ------------------------------------------------------

    /// Re-executes the recorded tape in f64, with optional overrides of leaf
    /// values, and returns the (scalar) value at `target`. The tape structure
    /// is data-independent, so a perturbed replay is a valid forward pass.
    pub fn replay_f64(&self, target: TensorId, overrides: &[(TensorId, Vec<f64>)]) -> f64 {
        let mut vals: Vec<Vec<f64>> = Vec::with_capacity(target.0 + 1);
        for idx in 0..=target.0 {
            let node = &self.nodes[idx];
            let v: Vec<f64> = match &node.op {
                Op::Leaf => {
                    if let Some((_, ov)) = overrides.iter().find(|(id, _)| id.0 == idx) {
                        ov.clone()
                    } else {
                        node.value.data.iter().map(|&v| v as f64).collect()
                    }
                }
                Op::MatMul(a, b) => {
                    let (sa, sb) = (&self.nodes[a.0].value.shape, &self.nodes[b.0].value.shape);
                    kernels::matmul(&vals[a.0], &vals[b.0], sa[0], sa[1], sb[1])
                }
                Op::MatMulNT(a, b) => {
                    let (sa, sb) = (&self.nodes[a.0].value.shape, &self.nodes[b.0].value.shape);
                    kernels::matmul_nt(&vals[a.0], &vals[b.0], sa[0], sa[1], sb[0])
                }
                Op::Transpose(a) => {
                    let sa = &self.nodes[a.0].value.shape;
                    kernels::transpose(&vals[a.0], sa[0], sa[1])
                }
                Op::Add(a, b) => kernels::bcast_binop(&vals[a.0], &vals[b.0], |x, y| x + y),
                Op::Sub(a, b) => kernels::bcast_binop(&vals[a.0], &vals[b.0], |x, y| x - y),
                Op::Mul(a, b) => kernels::bcast_binop(&vals[a.0], &vals[b.0], |x, y| x * y),
                Op::Scale(a, c) => vals[a.0].iter().map(|v| v * *c as f64).collect(),
                Op::AddConst(a, c) => vals[a.0].iter().map(|v| v + *c as f64).collect(),
                Op::Concat(a, b) => {
                    let p = self.nodes[a.0].value.last_dim();
                    let q = self.nodes[b.0].value.last_dim();
                    let rows = self.nodes[a.0].value.numel() / p;
                    let mut out = Vec::with_capacity(rows * (p + q));
                    for r in 0..rows {
                        out.extend_from_slice(&vals[a.0][r * p..(r + 1) * p]);
                        out.extend_from_slice(&vals[b.0][r * q..(r + 1) * q]);
                    }
                    out
                }
                Op::SliceLast(a, start, len) => {
                    let n = self.nodes[a.0].value.last_dim();
                    let rows = self.nodes[a.0].value.numel() / n;
                    let mut out = Vec::with_capacity(rows * len);
                    for r in 0..rows {
                        out.extend_from_slice(&vals[a.0][r * n + start..r * n + start + len]);
                    }
                    out
                }
                Op::Reshape(a) => vals[a.0].clone(),
                Op::Row(a, i) => {
                    let chunk = self.nodes[a.0].value.numel() / self.nodes[a.0].value.shape[0];
                    vals[a.0][i * chunk..(i + 1) * chunk].to_vec()
                }
                Op::Tanh(a) => vals[a.0].iter().map(|v| v.tanh()).collect(),
                Op::Exp(a) => vals[a.0].iter().map(|v| v.exp()).collect(),
                Op::Log(a) => vals[a.0].iter().map(|v| v.ln()).collect(),
                Op::Clamp(a, lo, hi) => {
                    vals[a.0].iter().map(|v| v.clamp(*lo as f64, *hi as f64)).collect()
                }
                Op::Softmax(a) => {
                    kernels::softmax_last(&vals[a.0], self.nodes[a.0].value.last_dim())
                }
                Op::Sum(a) => vec![vals[a.0].iter().sum()],
                Op::Mean(a) => {
                    vec![vals[a.0].iter().sum::<f64>() / vals[a.0].len() as f64]
                }
                Op::Embedding(table, ids) => {
                    let d = self.nodes[table.0].value.shape[1];
                    kernels::embedding(&vals[table.0], d, ids)
                }
                Op::LayerNorm(x, gamma, beta) => kernels::layer_norm(
                    &vals[x.0],
                    &vals[gamma.0],
                    &vals[beta.0],
                    self.nodes[x.0].value.last_dim(),
                    LN_EPS as f64,
                ),
                Op::CrossEntropy(logits, t) => {
                    vec![kernels::cross_entropy(&vals[logits.0], *t)]
                }
            };
            vals.push(v);
        }
        vals[target.0][0]
    }
}
