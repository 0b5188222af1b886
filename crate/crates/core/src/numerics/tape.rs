//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends one node whose inputs are earlier nodes, so the
//! node order is already topological and backward is a single reverse sweep.

use std::sync::Arc;

use crate::error::{Error, Result};

use super::kernels::{gelu, gelu_grad, log_sum_exp, masked_softmax_row};
use super::tensor::{gemm, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Gelu(Var),
    Sqrt(Var),
    RmsNorm { x: Var, w: Var, inv_rms: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    StackRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    MaskedSoftmax(Var),
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, count: usize },
    Sum(Var),
    Mean(Var),
    SumSquares(Var),
    Dot(Var, Var),
    CosineSim { a: Var, b: Var, na: f64, nb: f64 },
    NormalizeRows { x: Var, norms: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward computation.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that never tracks gradients; leaves are recorded as constants.
    pub fn no_grad() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.shared(Arc::new(value), requires_grad)
    }

    /// Record a leaf without copying its buffer.
    pub fn shared(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    fn mat2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let t = self.value(v);
        if t.shape().len() != 2 {
            return Err(Error::Dimension {
                op,
                lhs: t.shape().to_vec(),
                rhs: vec![],
            });
        }
        Ok(t.dims2())
    }

    /// `a·b` for `a: [m×k]`, `b: [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat2(a, "matmul")?;
        let (k2, n) = self.mat2(b, "matmul")?;
        if k != k2 {
            return Err(dim_err("matmul", self.value(a), self.value(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, self.value(a).data(), (k, 1), self.value(b).data(), (n, 1), 0.0, &mut out, (n, 1));
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), &[a, b]))
    }

    /// `a·bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat2(a, "matmul_nt")?;
        let (n, k2) = self.mat2(b, "matmul_nt")?;
        if k != k2 {
            return Err(dim_err("matmul_nt", self.value(a), self.value(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, self.value(a).data(), (k, 1), self.value(b).data(), (1, k), 0.0, &mut out, (n, 1));
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMulNt(a, b), &[a, b]))
    }

    fn zip_with(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| scale * v + shift).collect();
        let t = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Affine(x, scale), &[x])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.affine(x, c, 0.0)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| gelu(v)).collect();
        let t = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Gelu(x), &[x])
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| v.sqrt()).collect();
        let t = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Sqrt(x), &[x])
    }

    /// Row-wise `x / sqrt(mean(x²) + eps) ⊙ weight`.
    pub fn rms_norm(&mut self, x: Var, weight: Var, eps: f64) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(weight));
        let (rows, cols) = tx.dims2();
        if tw.numel() != cols {
            return Err(dim_err("rms_norm", tx, tw));
        }
        let mut out = vec![0.0; rows * cols];
        let mut inv_rms = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = tx.row(r);
            let ms = row.iter().map(|v| v * v).sum::<f64>() / cols as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            inv_rms.push(inv);
            for ((o, &v), &w) in out[r * cols..(r + 1) * cols].iter_mut().zip(row).zip(tw.data()) {
                *o = v * inv * w;
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(t, Op::RmsNorm { x, w: weight, inv_rms }, &[x, weight]))
    }

    /// Gather rows of `table: [V×d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (v, d) = self.mat2(table, "embedding")?;
        if ids.is_empty() {
            return Err(Error::contract("embedding lookup of zero ids"));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index { index: id, extent: v });
            }
            out.extend_from_slice(tt.row(id));
        }
        let t = Tensor::matrix(ids.len(), d, out)?;
        Ok(self.push(t, Op::Embedding { table, ids: ids.to_vec() }, &[table]))
    }

    /// Concatenate along the row axis; vectors count as one row each.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::contract("stack of zero tensors"))?;
        let cols = self.value(*first).dims2().1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            let (r, c) = t.dims2();
            if c != cols {
                return Err(dim_err("stack_rows", self.value(*first), t));
            }
            rows += r;
            data.extend_from_slice(t.data());
        }
        let t = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(t, Op::StackRows(parts.to_vec()), parts))
    }

    /// Rows `start..start+len` as a `[len×c]` matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = tx.dims2();
        if len == 0 || start + len > rows {
            return Err(Error::Index {
                index: start + len,
                extent: rows,
            });
        }
        let t = Tensor::matrix(len, cols, tx.data()[start * cols..(start + len) * cols].to_vec())?;
        Ok(self.push(t, Op::SliceRows { x, start }, &[x]))
    }

    /// Row `i` as a vector of shape `[c]`.
    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        let tx = self.value(x);
        let rows = tx.dims2().0;
        if i >= rows {
            return Err(Error::Index { index: i, extent: rows });
        }
        let t = Tensor::vector(tx.row(i).to_vec());
        Ok(self.push(t, Op::SliceRows { x, start: i }, &[x]))
    }

    /// Row-wise softmax of `x + mask`; masked entries come out exactly zero.
    pub fn masked_softmax(&mut self, x: Var, mask: &Tensor) -> Result<Var> {
        let t = super::kernels::masked_softmax(self.value(x), mask)?;
        Ok(self.push(t, Op::MaskedSoftmax(x), &[x]))
    }

    /// Multi-head scaled dot-product attention with an additive mask.
    ///
    /// `q`, `k`, `v` are `[L×D]` with heads laid out as contiguous column
    /// groups of width `D / heads`. `mask` is `[L×L]`; entry `(i, j)` is added
    /// to the score of query `i` against key `j`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: &Tensor) -> Result<Var> {
        let (l, d) = self.mat2(q, "attention")?;
        for other in [k, v] {
            if self.value(other).shape() != self.value(q).shape() {
                return Err(dim_err("attention", self.value(q), self.value(other)));
            }
        }
        if mask.shape() != [l, l] {
            return Err(dim_err("attention mask", self.value(q), mask));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::contract(format!("{d} columns do not split into {heads} heads")));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![0.0; heads * l * l];
        let mut scores = vec![0.0; l * l];
        let mut out = vec![0.0; l * d];
        for h in 0..heads {
            let off = h * dh;
            gemm(l, dh, l, scale, &tq.data()[off..], (d, 1), &tk.data()[off..], (1, d), 0.0, &mut scores, (l, 1));
            let p = &mut probs[h * l * l..(h + 1) * l * l];
            for i in 0..l {
                masked_softmax_row(&scores[i * l..(i + 1) * l], mask.row(i), &mut p[i * l..(i + 1) * l])
                    .ok_or(Error::DegenerateRow { row: i })?;
            }
            gemm(l, l, dh, 1.0, p, (l, 1), &tv.data()[off..], (d, 1), 0.0, &mut out[off..], (d, 1));
        }
        let t = Tensor::matrix(l, d, out)?;
        Ok(self.push(t, Op::Attention { q, k, v, heads, probs }, &[q, k, v]))
    }

    /// Attention probabilities `[heads×L×L]` saved by an attention node.
    pub fn attention_probs(&self, node: Var) -> Option<Tensor> {
        match &self.nodes[node.0].op {
            Op::Attention { heads, probs, .. } => {
                let l = self.value(node).dims2().0;
                Tensor::new(vec![*heads, l, l], probs.clone()).ok()
            }
            _ => None,
        }
    }

    /// Mean next-token cross-entropy over the rows whose target is `Some`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let t = self.value(logits);
        let (rows, vocab) = t.dims2();
        if targets.len() != rows {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: t.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let mut total = 0.0;
        let mut count = 0;
        for (r, target) in targets.iter().enumerate() {
            if let Some(y) = *target {
                if y >= vocab {
                    return Err(Error::Index { index: y, extent: vocab });
                }
                let row = t.row(r);
                total += log_sum_exp(row) - row[y];
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::contract("cross-entropy over zero marked positions"));
        }
        let out = Tensor::scalar(total / count as f64);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                count,
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|v| v * v).sum();
        self.push(Tensor::scalar(s), Op::SumSquares(x), &[x])
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.numel() != tb.numel() {
            return Err(dim_err("dot", ta, tb));
        }
        let s = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).sum();
        Ok(self.push(Tensor::scalar(s), Op::Dot(a, b), &[a, b]))
    }

    /// Cosine similarity of two equal-length vectors.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.numel() != tb.numel() {
            return Err(dim_err("cosine_similarity", ta, tb));
        }
        let na = ta.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = tb.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            return Err(Error::DegenerateVector { metric: "cosine" });
        }
        let dot: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).sum();
        Ok(self.push(Tensor::scalar(dot / (na * nb)), Op::CosineSim { a, b, na, nb }, &[a, b]))
    }

    /// Scale every row to unit Euclidean norm.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = tx.dims2();
        let mut norms = Vec::with_capacity(rows);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let n = tx.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(Error::DegenerateVector { metric: "normalize" });
            }
            norms.push(n);
            for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(tx.row(r)) {
                *o = v / n;
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(t, Op::NormalizeRows { x, norms }, &[x]))
    }

    /// Gradients of a scalar `loss` with respect to every leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let t = self.value(loss);
        if !t.is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                t.shape()
            )));
        }
        self.backward_from(&[(loss, Tensor::scalar(1.0))])
    }

    /// Reverse sweep seeded with upstream gradients on arbitrary nodes.
    pub fn backward_from(&self, seeds: &[(Var, Tensor)]) -> Result<Gradients> {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        for (v, g) in seeds {
            if g.numel() != self.value(*v).numel() {
                return Err(dim_err("backward seed", self.value(*v), g));
            }
            if self.nodes[v.0].requires_grad {
                accumulate(&mut grads, &self.nodes, *v, |d| {
                    for (x, y) in d.iter_mut().zip(g.data()) {
                        *x += y;
                    }
                });
            }
        }
        let mut leaf_grads: Vec<Option<Tensor>> = vec![None; n];
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let data = grads[i].take().unwrap_or_else(|| vec![0.0; node.value.numel()]);
                leaf_grads[i] = Some(Tensor::new(node.value.shape().to_vec(), data)?);
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads: leaf_grads })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2();
                let n = self.value(*b).dims2().1;
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                accumulate(grads, nodes, *a, |da| gemm(m, n, k, 1.0, g, (n, 1), tb, (1, n), 1.0, da, (k, 1)));
                accumulate(grads, nodes, *b, |db| gemm(k, m, n, 1.0, ta, (1, k), g, (n, 1), 1.0, db, (n, 1)));
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.value(*a).dims2();
                let n = self.value(*b).dims2().0;
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                accumulate(grads, nodes, *a, |da| gemm(m, n, k, 1.0, g, (n, 1), tb, (k, 1), 1.0, da, (k, 1)));
                accumulate(grads, nodes, *b, |db| gemm(n, m, k, 1.0, g, (1, n), ta, (k, 1), 1.0, db, (k, 1)));
            }
            Op::Add(a, b) => {
                accumulate(grads, nodes, *a, |d| add_into(d, g));
                accumulate(grads, nodes, *b, |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                accumulate(grads, nodes, *a, |d| add_into(d, g));
                accumulate(grads, nodes, *b, |d| {
                    for (x, y) in d.iter_mut().zip(g) {
                        *x -= y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                accumulate(grads, nodes, *a, |d| {
                    for ((x, gy), bv) in d.iter_mut().zip(g).zip(tb) {
                        *x += gy * bv;
                    }
                });
                accumulate(grads, nodes, *b, |d| {
                    for ((x, gy), av) in d.iter_mut().zip(g).zip(ta) {
                        *x += gy * av;
                    }
                });
            }
            Op::Affine(x, c) => accumulate(grads, nodes, *x, |d| {
                for (v, gy) in d.iter_mut().zip(g) {
                    *v += c * gy;
                }
            }),
            Op::Gelu(x) => {
                let tx = self.value(*x).data();
                accumulate(grads, nodes, *x, |d| {
                    for ((v, gy), xv) in d.iter_mut().zip(g).zip(tx) {
                        *v += gy * gelu_grad(*xv);
                    }
                });
            }
            Op::Sqrt(x) => accumulate(grads, nodes, *x, |d| {
                for ((v, gy), y) in d.iter_mut().zip(g).zip(out.data()) {
                    if *y > 0.0 {
                        *v += gy * 0.5 / y;
                    }
                }
            }),
            Op::RmsNorm { x, w, inv_rms } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (rows, cols) = tx.dims2();
                accumulate(grads, nodes, *w, |dw| {
                    for r in 0..rows {
                        let inv = inv_rms[r];
                        for ((d, &xv), &gy) in dw.iter_mut().zip(tx.row(r)).zip(&g[r * cols..]) {
                            *d += gy * xv * inv;
                        }
                    }
                });
                accumulate(grads, nodes, *x, |dx| {
                    for r in 0..rows {
                        let inv = inv_rms[r];
                        let row = tx.row(r);
                        let gr = &g[r * cols..(r + 1) * cols];
                        let proj: f64 = gr.iter().zip(tw.data()).zip(row).map(|((gy, wv), xv)| gy * wv * xv).sum();
                        let coef = inv * inv * inv * proj / cols as f64;
                        for (((d, &gy), &wv), &xv) in dx[r * cols..].iter_mut().zip(gr).zip(tw.data()).zip(row) {
                            *d += inv * gy * wv - coef * xv;
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = self.value(*table).dims2().1;
                accumulate(grads, nodes, *table, |dt| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut dt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::StackRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).numel();
                    accumulate(grads, nodes, *p, |d| add_into(d, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::SliceRows { x, start } => {
                let cols = self.value(*x).dims2().1;
                let off = start * cols;
                accumulate(grads, nodes, *x, |d| add_into(&mut d[off..off + g.len()], g));
            }
            Op::MaskedSoftmax(x) => {
                let (rows, cols) = out.dims2();
                accumulate(grads, nodes, *x, |d| {
                    for r in 0..rows {
                        let p = out.row(r);
                        let gr = &g[r * cols..(r + 1) * cols];
                        let s: f64 = p.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((dv, &pv), &gy) in d[r * cols..].iter_mut().zip(p).zip(gr) {
                            *dv += pv * (gy - s);
                        }
                    }
                });
            }
            Op::Attention { q, k, v, heads, probs } => self.backprop_attention(*q, *k, *v, *heads, probs, g, grads),
            Op::CrossEntropy { logits, targets, count } => {
                let t = self.value(*logits);
                let vocab = t.dims2().1;
                let scale = g[0] / *count as f64;
                accumulate(grads, nodes, *logits, |d| {
                    for (r, target) in targets.iter().enumerate() {
                        let Some(y) = *target else { continue };
                        let row = t.row(r);
                        let lse = log_sum_exp(row);
                        let dr = &mut d[r * vocab..(r + 1) * vocab];
                        for (dv, &z) in dr.iter_mut().zip(row) {
                            *dv += scale * (z - lse).exp();
                        }
                        dr[y] -= scale;
                    }
                });
            }
            Op::Sum(x) => accumulate(grads, nodes, *x, |d| d.iter_mut().for_each(|v| *v += g[0])),
            Op::Mean(x) => {
                let c = g[0] / self.value(*x).numel() as f64;
                accumulate(grads, nodes, *x, |d| d.iter_mut().for_each(|v| *v += c));
            }
            Op::SumSquares(x) => {
                let tx = self.value(*x).data();
                accumulate(grads, nodes, *x, |d| {
                    for (v, xv) in d.iter_mut().zip(tx) {
                        *v += 2.0 * g[0] * xv;
                    }
                });
            }
            Op::Dot(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                accumulate(grads, nodes, *a, |d| {
                    for (v, y) in d.iter_mut().zip(tb) {
                        *v += g[0] * y;
                    }
                });
                accumulate(grads, nodes, *b, |d| {
                    for (v, x) in d.iter_mut().zip(ta) {
                        *v += g[0] * x;
                    }
                });
            }
            Op::CosineSim { a, b, na, nb } => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                let cos = out.item();
                accumulate(grads, nodes, *a, |d| {
                    for ((v, &x), &y) in d.iter_mut().zip(ta).zip(tb) {
                        *v += g[0] * (y / (na * nb) - cos * x / (na * na));
                    }
                });
                accumulate(grads, nodes, *b, |d| {
                    for ((v, &x), &y) in d.iter_mut().zip(ta).zip(tb) {
                        *v += g[0] * (x / (na * nb) - cos * y / (nb * nb));
                    }
                });
            }
            Op::NormalizeRows { x, norms } => {
                let (rows, cols) = out.dims2();
                accumulate(grads, nodes, *x, |d| {
                    for r in 0..rows {
                        let y = out.row(r);
                        let gr = &g[r * cols..(r + 1) * cols];
                        let proj: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((dv, &yv), &gy) in d[r * cols..].iter_mut().zip(y).zip(gr) {
                            *dv += (gy - yv * proj) / norms[r];
                        }
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (l, d) = self.value(q).dims2();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (tq, tk, tv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let need = |x: Var| self.nodes[x.0].requires_grad;
        let mut dq = need(q).then(|| vec![0.0; l * d]);
        let mut dk = need(k).then(|| vec![0.0; l * d]);
        let mut dv = need(v).then(|| vec![0.0; l * d]);
        let mut dp = vec![0.0; l * l];
        for h in 0..heads {
            let off = h * dh;
            let p = &probs[h * l * l..(h + 1) * l * l];
            if let Some(dv) = dv.as_mut() {
                gemm(l, l, dh, 1.0, p, (1, l), &g[off..], (d, 1), 1.0, &mut dv[off..], (d, 1));
            }
            if dq.is_none() && dk.is_none() {
                continue;
            }
            // dP = dO·Vᵀ, then the softmax Jacobian turns it into dS in place.
            gemm(l, dh, l, 1.0, &g[off..], (d, 1), &tv[off..], (1, d), 0.0, &mut dp, (l, 1));
            for i in 0..l {
                let pr = &p[i * l..(i + 1) * l];
                let dr = &mut dp[i * l..(i + 1) * l];
                let s: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                for (x, &pv) in dr.iter_mut().zip(pr) {
                    *x = pv * (*x - s);
                }
            }
            if let Some(dq) = dq.as_mut() {
                gemm(l, l, dh, scale, &dp, (l, 1), &tk[off..], (d, 1), 1.0, &mut dq[off..], (d, 1));
            }
            if let Some(dk) = dk.as_mut() {
                gemm(l, l, dh, scale, &dp, (1, l), &tq[off..], (d, 1), 1.0, &mut dk[off..], (d, 1));
            }
        }
        for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(buf) = buf {
                accumulate(grads, &self.nodes, var, |d| add_into(d, &buf));
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, f: impl FnOnce(&mut [f64])) {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return;
    }
    let buf = grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]);
    f(buf);
}

/// Leaf gradients produced by a backward sweep.
///
/// Every leaf that requires grad has an entry; leaves the loss does not reach
/// get zeros.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
