//! Dynamic tape for reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass as a node holding
//! its output value and the ids of its parents. Nodes are appended in
//! evaluation order, so the tape order is already topological and
//! [`Graph::backward`] walks it once in reverse. Every tensor is treated as a
//! matrix (`rows × cols`); scalars are 1×1.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::grad::params::{ParamId, ParamStore};
use crate::grad::tensor::{gemm, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Neg,
    Tanh,
    Relu,
    Sigmoid,
    Softplus,
    Exp,
    Log,
    Square,
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Neg => "neg",
            Unary::Tanh => "tanh",
            Unary::Relu => "relu",
            Unary::Sigmoid => "sigmoid",
            Unary::Softplus => "softplus",
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Square => "square",
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Neg => -x,
            Unary::Tanh => x.tanh(),
            Unary::Relu => x.max(0.0),
            Unary::Sigmoid => sigmoid(x),
            Unary::Softplus => softplus(x),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Square => x * x,
        }
    }

    /// d(out)/d(in) given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Neg => -1.0,
            Unary::Tanh => 1.0 - y * y,
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Softplus => sigmoid(x),
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Square => 2.0 * x,
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

impl Binary {
    fn name(self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        }
    }

    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            Binary::Add => a + b,
            Binary::Sub => a - b,
            Binary::Mul => a * b,
            Binary::Div => a / b,
        }
    }

    fn partials(self, a: f64, b: f64) -> (f64, f64) {
        match self {
            Binary::Add => (1.0, 1.0),
            Binary::Sub => (1.0, -1.0),
            Binary::Mul => (b, a),
            Binary::Div => (1.0 / b, -a / (b * b)),
        }
    }
}

/// Padded layout of a batch of variable-length sets: row `b * t_max + i`
/// holds element `i` of set `b`; only `i < lengths[b]` is real data.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SetLayout {
    pub t_max: usize,
    pub lengths: Vec<usize>,
}

impl SetLayout {
    pub fn new(t_max: usize, lengths: Vec<usize>) -> Result<Self> {
        if lengths.iter().any(|&l| l > t_max) {
            return Err(Error::config("set length exceeds t_max"));
        }
        Ok(Self { t_max, lengths })
    }

    pub fn batch(&self) -> usize {
        self.lengths.len()
    }

    pub fn rows(&self) -> usize {
        self.batch() * self.t_max
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Unary(Unary, Var),
    Binary(Binary, Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    SumAxis(Var, usize),
    LogSumExp(Var, usize),
    Concat(Vec<Var>, usize),
    SelectCols(Var, Vec<usize>),
    SelectRows(Var, Vec<usize>),
    AttnScores { q: Var, k: Var, heads: usize, layout: SetLayout },
    MaskedSoftmax { x: Var, valid: Vec<usize> },
    AttnMix { w: Var, v: Var, heads: usize, layout: SetLayout },
    SetPool { x: Var, layout: SetLayout, mean: bool },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Unary(u, _) => u.name(),
            Op::Binary(b, ..) => b.name(),
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Sum(..) => "sum",
            Op::SumAxis(..) => "sum_axis",
            Op::LogSumExp(..) => "logsumexp",
            Op::Concat(..) => "concat",
            Op::SelectCols(..) => "select_cols",
            Op::SelectRows(..) => "select_rows",
            Op::AttnScores { .. } => "attn_scores",
            Op::MaskedSoftmax { .. } => "masked_softmax",
            Op::AttnMix { .. } => "attn_mix",
            Op::SetPool { .. } => "set_pool",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// One forward pass worth of recorded operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<(u64, ParamId), Var>,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn broadcast_dims(a: (usize, usize), b: (usize, usize)) -> Option<(usize, usize)> {
    let dim = |x: usize, y: usize| {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    Some((dim(a.0, b.0)?, dim(a.1, b.1)?))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::MatMul(a, b) | Op::Binary(_, a, b) => self.rg(*a) || self.rg(*b),
            Op::Unary(_, a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Sum(a)
            | Op::SumAxis(a, _)
            | Op::LogSumExp(a, _)
            | Op::SelectCols(a, _)
            | Op::SelectRows(a, _) => self.rg(*a),
            Op::Concat(vs, _) => vs.iter().any(|v| self.rg(*v)),
            Op::AttnScores { q, k, .. } => self.rg(*q) || self.rg(*k),
            Op::MaskedSoftmax { x, .. } => self.rg(*x),
            Op::AttnMix { w, v, .. } => self.rg(*w) || self.rg(*v),
            Op::SetPool { x, .. } => self.rg(*x),
        };
        if !matches!(op, Op::Leaf) && !value.all_finite() {
            return Err(Error::Numerical {
                node: self.nodes.len(),
                op: op.name(),
            });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant input (no gradient requested).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient will be reported by [`Gradients::wrt`].
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf for a stored parameter; repeated calls return the
    /// same node so gradients accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&(store.uid(), id)) {
            return v;
        }
        let v = self.variable(store.get(id).clone());
        self.params.insert((store.uid(), id), v);
        v
    }

    /// Parameter value as a constant (no gradient flows into the store).
    pub fn frozen(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.input(store.get(id).clone())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::config(format!("matmul: {m}x{k} · {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b))
    }

    fn unary(&mut self, op: Unary, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| op.apply(x));
        self.push(value, Op::Unary(op, a))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Neg, a)
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Tanh, a)
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Relu, a)
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, a)
    }
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Softplus, a)
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Exp, a)
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Log, a)
    }
    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Square, a)
    }

    fn binary(&mut self, op: Binary, a: Var, b: Var) -> Result<Var> {
        let da = self.dims(a);
        let db = self.dims(b);
        let (m, n) = broadcast_dims(da, db)
            .ok_or_else(|| Error::config(format!("{}: cannot broadcast {da:?} with {db:?}", op.name())))?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let ia = if da.0 == 1 { 0 } else { i };
            let ib = if db.0 == 1 { 0 } else { i };
            for j in 0..n {
                let x = av[ia * da.1 + if da.1 == 1 { 0 } else { j }];
                let y = bv[ib * db.1 + if db.1 == 1 { 0 } else { j }];
                out.push(op.apply(x, y));
            }
        }
        self.push(Tensor::matrix(m, n, out)?, Op::Binary(op, a, b))
    }

    /// Elementwise sum with row/column broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    /// `x · w + bias` with `bias` a single row.
    pub fn affine(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add(h, bias)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x * c);
        self.push(value, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x + c);
        self.push(value, Op::AddScalar(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(Error::config("mean of empty tensor"));
        }
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum over `axis` (0: collapse rows → 1×n, 1: collapse columns → m×1).
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        let x = self.value(a).data();
        let out = match axis {
            0 => {
                let mut o = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        o[j] += x[i * n + j];
                    }
                }
                Tensor::matrix(1, n, o)?
            }
            1 => Tensor::matrix(m, 1, (0..m).map(|i| x[i * n..(i + 1) * n].iter().sum()).collect())?,
            _ => return Err(Error::config(format!("sum_axis: bad axis {axis}"))),
        };
        self.push(out, Op::SumAxis(a, axis))
    }

    /// Max-shifted `log Σ exp` over `axis`.
    pub fn logsumexp(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        let x = self.value(a).data();
        let out = match axis {
            0 => {
                let vals = (0..n)
                    .map(|j| logsumexp_iter((0..m).map(|i| x[i * n + j])))
                    .collect();
                Tensor::matrix(1, n, vals)?
            }
            1 => {
                let vals = (0..m).map(|i| logsumexp_slice(&x[i * n..(i + 1) * n])).collect();
                Tensor::matrix(m, 1, vals)?
            }
            _ => return Err(Error::config(format!("logsumexp: bad axis {axis}"))),
        };
        self.push(out, Op::LogSumExp(a, axis))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let lse = self.logsumexp(a, 1)?;
        self.sub(a, lse)
    }

    /// Concatenate along `axis` (0: stack rows, 1: join columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::config("concat of nothing"));
        }
        let dims: Vec<_> = parts.iter().map(|&p| self.dims(p)).collect();
        let out = match axis {
            0 => {
                let n = dims[0].1;
                if dims.iter().any(|d| d.1 != n) {
                    return Err(Error::config(format!("concat rows: {dims:?}")));
                }
                let mut data = Vec::new();
                for &p in parts {
                    data.extend_from_slice(self.value(p).data());
                }
                let m = dims.iter().map(|d| d.0).sum();
                Tensor::matrix(m, n, data)?
            }
            1 => {
                let m = dims[0].0;
                if dims.iter().any(|d| d.0 != m) {
                    return Err(Error::config(format!("concat cols: {dims:?}")));
                }
                let n: usize = dims.iter().map(|d| d.1).sum();
                let mut data = Vec::with_capacity(m * n);
                for i in 0..m {
                    for &p in parts {
                        data.extend_from_slice(self.value(p).row_slice(i));
                    }
                }
                Tensor::matrix(m, n, data)?
            }
            _ => return Err(Error::config(format!("concat: bad axis {axis}"))),
        };
        self.push(out, Op::Concat(parts.to_vec(), axis))
    }

    /// Gather columns by index (repeats allowed).
    pub fn select_cols(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(a);
        if idx.iter().any(|&j| j >= n) {
            return Err(Error::config(format!("select_cols: index out of range for {n} columns")));
        }
        let x = self.value(a).data();
        let mut data = Vec::with_capacity(m * idx.len());
        for i in 0..m {
            data.extend(idx.iter().map(|&j| x[i * n + j]));
        }
        self.push(Tensor::matrix(m, idx.len(), data)?, Op::SelectCols(a, idx.to_vec()))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let idx: Vec<usize> = (start..end).collect();
        self.select_cols(a, &idx)
    }

    /// Gather rows by index (repeats allowed).
    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(a);
        if idx.iter().any(|&i| i >= m) {
            return Err(Error::config(format!("select_rows: index out of range for {m} rows")));
        }
        let x = self.value(a).data();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(&x[i * n..(i + 1) * n]);
        }
        self.push(Tensor::matrix(idx.len(), n, data)?, Op::SelectRows(a, idx.to_vec()))
    }

    fn check_set(&self, v: Var, layout: &SetLayout, what: &str) -> Result<(usize, usize)> {
        let (m, e) = self.dims(v);
        if m != layout.rows() {
            return Err(Error::config(format!("{what}: {m} rows for layout of {}", layout.rows())));
        }
        Ok((m, e))
    }

    /// Per-head scaled dot products for padded sets. Output row
    /// `(b * heads + h) * t_max + i`, column `j` holds
    /// `q[b,i,h] · k[b,j,h] / sqrt(head_dim)`.
    pub fn attn_scores(&mut self, q: Var, k: Var, heads: usize, layout: &SetLayout) -> Result<Var> {
        let (_, e) = self.check_set(q, layout, "attn_scores")?;
        if self.dims(k) != self.dims(q) || heads == 0 || e % heads != 0 {
            return Err(Error::config("attn_scores: q/k shape or head count mismatch"));
        }
        let (t, dh) = (layout.t_max, e / heads);
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv) = (self.value(q).data(), self.value(k).data());
        let mut out = vec![0.0; layout.batch() * heads * t * t];
        for b in 0..layout.batch() {
            for h in 0..heads {
                for i in 0..t {
                    let qrow = &qv[(b * t + i) * e + h * dh..][..dh];
                    let r = ((b * heads + h) * t + i) * t;
                    for j in 0..t {
                        let krow = &kv[(b * t + j) * e + h * dh..][..dh];
                        out[r + j] = scale * qrow.iter().zip(krow).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
            }
        }
        let rows = layout.batch() * heads * t;
        self.push(
            Tensor::matrix(rows, t, out)?,
            Op::AttnScores {
                q,
                k,
                heads,
                layout: layout.clone(),
            },
        )
    }

    /// Row-wise softmax over the first `valid[r]` columns; the rest are 0.
    /// A row with no valid columns is all zeros.
    pub fn masked_softmax(&mut self, x: Var, valid: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(x);
        if valid.len() != m || valid.iter().any(|&v| v > n) {
            return Err(Error::config("masked_softmax: bad valid lengths"));
        }
        let xv = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let len = valid[r];
            if len == 0 {
                continue;
            }
            let row = &xv[r * n..r * n + len];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - mx).exp();
                out[r * n + j] = e;
                z += e;
            }
            for o in &mut out[r * n..r * n + len] {
                *o /= z;
            }
        }
        self.push(
            Tensor::matrix(m, n, out)?,
            Op::MaskedSoftmax {
                x,
                valid: valid.to_vec(),
            },
        )
    }

    /// Attention-weighted mix of `v` per head: inverse layout of
    /// [`Graph::attn_scores`].
    pub fn attn_mix(&mut self, w: Var, v: Var, heads: usize, layout: &SetLayout) -> Result<Var> {
        let (_, e) = self.check_set(v, layout, "attn_mix")?;
        let t = layout.t_max;
        if self.dims(w) != (layout.batch() * heads * t, t) || heads == 0 || e % heads != 0 {
            return Err(Error::config("attn_mix: weight shape mismatch"));
        }
        let dh = e / heads;
        let (wv, vv) = (self.value(w).data(), self.value(v).data());
        let mut out = vec![0.0; layout.rows() * e];
        for b in 0..layout.batch() {
            for h in 0..heads {
                for i in 0..t {
                    let wrow = &wv[((b * heads + h) * t + i) * t..][..t];
                    let orow = (b * t + i) * e + h * dh;
                    for (j, &wij) in wrow.iter().enumerate() {
                        if wij == 0.0 {
                            continue;
                        }
                        let vrow = &vv[(b * t + j) * e + h * dh..][..dh];
                        for d in 0..dh {
                            out[orow + d] += wij * vrow[d];
                        }
                    }
                }
            }
        }
        self.push(
            Tensor::matrix(layout.rows(), e, out)?,
            Op::AttnMix {
                w,
                v,
                heads,
                layout: layout.clone(),
            },
        )
    }

    /// Sum (or mean) over the real elements of each set → `batch × cols`.
    /// The mean of an empty set is 0.
    pub fn set_pool(&mut self, x: Var, layout: &SetLayout, mean: bool) -> Result<Var> {
        let (_, e) = self.check_set(x, layout, "set_pool")?;
        let xv = self.value(x).data();
        let t = layout.t_max;
        let mut out = vec![0.0; layout.batch() * e];
        for (b, &len) in layout.lengths.iter().enumerate() {
            let w = if mean && len > 0 { 1.0 / len as f64 } else { 1.0 };
            for i in 0..len {
                let row = &xv[(b * t + i) * e..][..e];
                for (o, &v) in out[b * e..(b + 1) * e].iter_mut().zip(row) {
                    *o += w * v;
                }
            }
        }
        self.push(
            Tensor::matrix(layout.batch(), e, out)?,
            Op::SetPool {
                x,
                layout: layout.clone(),
                mean,
            },
        )
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut adj: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[root.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=root.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut adj)?;
            adj[idx] = Some(g);
        }
        let params = self
            .params
            .iter()
            .map(|(&(uid, pid), &v)| ((uid, pid), v))
            .collect();
        Ok(Gradients { adj, params })
    }

    fn propagate(&self, idx: usize, g: &Tensor, adj: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        let out = &node.value;
        let gd = g.data();
        let mut acc = |v: Var, t: Tensor, graph: &Graph| {
            if !graph.rg(v) {
                return;
            }
            match &mut adj[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let (_, n) = self.dims(*b);
                if self.rg(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, gd, false, self.value(*b).data(), true, &mut da, false);
                    acc(*a, Tensor::matrix(m, k, da)?, self);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, self.value(*a).data(), true, gd, false, &mut db, false);
                    acc(*b, Tensor::matrix(k, n, db)?, self);
                }
            }
            Op::Unary(u, a) => {
                let x = self.value(*a).data();
                let data = x
                    .iter()
                    .zip(out.data())
                    .zip(gd)
                    .map(|((&xi, &yi), &gi)| gi * u.derivative(xi, yi))
                    .collect();
                acc(*a, Tensor::new(self.value(*a).shape().to_vec(), data)?, self);
            }
            Op::Binary(op, a, b) => {
                let (m, n) = out.dims2();
                let da = self.dims(*a);
                let db = self.dims(*b);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let mut ga = vec![0.0; da.0 * da.1];
                let mut gb = vec![0.0; db.0 * db.1];
                for i in 0..m {
                    for j in 0..n {
                        let ia = (if da.0 == 1 { 0 } else { i }) * da.1 + if da.1 == 1 { 0 } else { j };
                        let ib = (if db.0 == 1 { 0 } else { i }) * db.1 + if db.1 == 1 { 0 } else { j };
                        let (pa, pb) = op.partials(av[ia], bv[ib]);
                        let gij = gd[i * n + j];
                        ga[ia] += gij * pa;
                        gb[ib] += gij * pb;
                    }
                }
                acc(*a, Tensor::matrix(da.0, da.1, ga)?, self);
                acc(*b, Tensor::matrix(db.0, db.1, gb)?, self);
            }
            Op::Scale(a, c) => acc(*a, g.map(|x| x * c), self),
            Op::AddScalar(a) => acc(*a, g.clone(), self),
            Op::Sum(a) => {
                let (m, n) = self.dims(*a);
                acc(*a, Tensor::full(m, n, gd[0]), self);
            }
            Op::SumAxis(a, axis) => {
                let (m, n) = self.dims(*a);
                let data = (0..m * n)
                    .map(|ij| if *axis == 0 { gd[ij % n] } else { gd[ij / n] })
                    .collect();
                acc(*a, Tensor::matrix(m, n, data)?, self);
            }
            Op::LogSumExp(a, axis) => {
                let (m, n) = self.dims(*a);
                let x = self.value(*a).data();
                let y = out.data();
                let data = (0..m * n)
                    .map(|ij| {
                        let r = if *axis == 0 { ij % n } else { ij / n };
                        gd[r] * (x[ij] - y[r]).exp()
                    })
                    .collect();
                acc(*a, Tensor::matrix(m, n, data)?, self);
            }
            Op::Concat(parts, axis) => {
                let (_, n_out) = out.dims2();
                let mut offset = 0;
                for &p in parts {
                    let (m, n) = self.dims(p);
                    let t = if *axis == 0 {
                        let t = Tensor::matrix(m, n, gd[offset * n_out..(offset + m) * n_out].to_vec())?;
                        offset += m;
                        t
                    } else {
                        let mut data = Vec::with_capacity(m * n);
                        for i in 0..m {
                            data.extend_from_slice(&gd[i * n_out + offset..i * n_out + offset + n]);
                        }
                        offset += n;
                        Tensor::matrix(m, n, data)?
                    };
                    acc(p, t, self);
                }
            }
            Op::SelectCols(a, idx) => {
                let (m, n) = self.dims(*a);
                let k = idx.len();
                let mut data = vec![0.0; m * n];
                for i in 0..m {
                    for (c, &j) in idx.iter().enumerate() {
                        data[i * n + j] += gd[i * k + c];
                    }
                }
                acc(*a, Tensor::matrix(m, n, data)?, self);
            }
            Op::SelectRows(a, idx) => {
                let (m, n) = self.dims(*a);
                let mut data = vec![0.0; m * n];
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..n {
                        data[i * n + j] += gd[r * n + j];
                    }
                }
                acc(*a, Tensor::matrix(m, n, data)?, self);
            }
            Op::AttnScores { q, k, heads, layout } => {
                let (rows, e) = self.dims(*q);
                let (t, dh) = (layout.t_max, e / heads);
                let scale = 1.0 / (dh as f64).sqrt();
                let (qv, kv) = (self.value(*q).data(), self.value(*k).data());
                let mut dq = vec![0.0; rows * e];
                let mut dk = vec![0.0; rows * e];
                for b in 0..layout.batch() {
                    for h in 0..*heads {
                        for i in 0..t {
                            let r = ((b * heads + h) * t + i) * t;
                            let qi = (b * t + i) * e + h * dh;
                            for j in 0..t {
                                let gij = gd[r + j] * scale;
                                if gij == 0.0 {
                                    continue;
                                }
                                let kj = (b * t + j) * e + h * dh;
                                for d in 0..dh {
                                    dq[qi + d] += gij * kv[kj + d];
                                    dk[kj + d] += gij * qv[qi + d];
                                }
                            }
                        }
                    }
                }
                acc(*q, Tensor::matrix(rows, e, dq)?, self);
                acc(*k, Tensor::matrix(rows, e, dk)?, self);
            }
            Op::MaskedSoftmax { x, valid } => {
                let (m, n) = out.dims2();
                let y = out.data();
                let mut data = vec![0.0; m * n];
                for r in 0..m {
                    let len = valid[r];
                    let dot: f64 = (0..len).map(|j| y[r * n + j] * gd[r * n + j]).sum();
                    for j in 0..len {
                        data[r * n + j] = y[r * n + j] * (gd[r * n + j] - dot);
                    }
                }
                acc(*x, Tensor::matrix(m, n, data)?, self);
            }
            Op::AttnMix { w, v, heads, layout } => {
                let (rows, e) = self.dims(*v);
                let (t, dh) = (layout.t_max, e / heads);
                let (wv, vv) = (self.value(*w).data(), self.value(*v).data());
                let mut dw = vec![0.0; wv.len()];
                let mut dv = vec![0.0; rows * e];
                for b in 0..layout.batch() {
                    for h in 0..*heads {
                        for i in 0..t {
                            let r = ((b * heads + h) * t + i) * t;
                            let gi = (b * t + i) * e + h * dh;
                            for j in 0..t {
                                let vj = (b * t + j) * e + h * dh;
                                let mut s = 0.0;
                                for d in 0..dh {
                                    s += gd[gi + d] * vv[vj + d];
                                    dv[vj + d] += wv[r + j] * gd[gi + d];
                                }
                                dw[r + j] = s;
                            }
                        }
                    }
                }
                let (wm, wn) = self.dims(*w);
                acc(*w, Tensor::matrix(wm, wn, dw)?, self);
                acc(*v, Tensor::matrix(rows, e, dv)?, self);
            }
            Op::SetPool { x, layout, mean } => {
                let (rows, e) = self.dims(*x);
                let t = layout.t_max;
                let mut data = vec![0.0; rows * e];
                for (b, &len) in layout.lengths.iter().enumerate() {
                    let w = if *mean && len > 0 { 1.0 / len as f64 } else { 1.0 };
                    for i in 0..len {
                        for d in 0..e {
                            data[(b * t + i) * e + d] = w * gd[b * e + d];
                        }
                    }
                }
                acc(*x, Tensor::matrix(rows, e, data)?, self);
            }
        }
        Ok(())
    }
}

/// Adjoints produced by [`Graph::backward`].
pub struct Gradients {
    adj: Vec<Option<Tensor>>,
    params: HashMap<(u64, ParamId), Var>,
}

impl Gradients {
    /// Gradient of the root with respect to `v` (None when `v` does not
    /// influence the root or was not marked for gradients).
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.adj.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients for every parameter of `store`, indexed by [`ParamId`].
    pub fn for_store(&self, store: &ParamStore) -> Vec<Option<Tensor>> {
        store
            .ids()
            .map(|id| {
                self.params
                    .get(&(store.uid(), id))
                    .and_then(|&v| self.wrt(v).cloned())
            })
            .collect()
    }
}

/// Max-shifted `log Σ exp` of a slice; `-inf` for an empty slice.
pub fn logsumexp_slice(xs: &[f64]) -> f64 {
    logsumexp_iter(xs.iter().copied())
}

pub fn logsumexp_iter(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let mx = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY || mx.is_nan() {
        return mx;
    }
    if mx == f64::INFINITY {
        return mx;
    }
    mx + xs.map(|x| (x - mx).exp()).sum::<f64>().ln()
}
