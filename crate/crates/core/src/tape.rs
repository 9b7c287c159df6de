//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Every operation appends a node to the [`Tape`]; nodes are stored in
//! execution order, so inputs always precede the ops that consume them.
//! [`Tape::backward`] consumes the tape and returns the accumulated
//! gradients of every node that requires one.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::{contract, Error, Result};
use crate::tensor::{axis_split, matmul_nt_into, matmul_tn_into, Tensor};

/// Probabilities below this floor are clamped before taking logarithms.
pub const LOG_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Layout of a batched multi-head attention call.
#[derive(Debug, Clone, Copy)]
pub struct AttentionDims {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Vec<f64>),
    Scale(Var, f64),
    Reshape(Var),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ScaleRows(Var, Var),
    Sum(Var),
    SumSquares(Var),
    CrossEntropy {
        probs: Var,
        labels: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        dims: AttentionDims,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
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

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn erf_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

fn gelu(x: f64) -> f64 {
    x * erf_cdf(x)
}

fn gelu_grad(x: f64) -> f64 {
    erf_cdf(x) + x * (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("add", ta, tb)?;
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Adds a length-`n` bias vector to every row of an `m × n` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let (m, n) = tx.dims2()?;
        if tb.shape() != [n] {
            return Err(Error::Shape {
                op: "add_bias",
                left: tx.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let mut data = tx.data().to_vec();
        for i in 0..m {
            for (d, b) in data[i * n..(i + 1) * n].iter_mut().zip(tb.data()) {
                *d += b;
            }
        }
        let out = Tensor::new(vec![m, n], data)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(out, Op::AddBias(x, bias), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("mul", ta, tb)?;
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Elementwise product with a constant buffer (dropout masks, probes).
    pub fn mul_const(&mut self, x: Var, c: Vec<f64>) -> Result<Var> {
        let tx = self.value(x);
        if tx.numel() != c.len() {
            return Err(Error::Shape {
                op: "mul_const",
                left: tx.shape().to_vec(),
                right: vec![c.len()],
            });
        }
        let data = tx.data().iter().zip(&c).map(|(a, b)| a * b).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::MulConst(x, c), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v * s).collect();
        let out = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, s), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(out, op, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu, Op::Gelu(x))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = self.value(x).softmax(axis)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Softmax { x, axis }, rg))
    }

    /// Row-wise layer normalization of an `m × n` matrix.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = tx.dims2()?;
        for p in [gamma, beta] {
            if self.value(p).shape() != [n] {
                return Err(Error::Shape {
                    op: "layer_norm",
                    left: tx.shape().to_vec(),
                    right: self.value(p).shape().to_vec(),
                });
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = tx.row(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = g[j] * h + b[j];
            }
        }
        let out = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Selects rows of a matrix by index; also serves as an embedding lookup.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = tx.dims2()?;
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                return Err(Error::Index {
                    what: "gather_rows",
                    index: r,
                    bound: m,
                });
            }
            data.extend_from_slice(tx.row(r));
        }
        let out = Tensor::new(vec![rows.len(), n], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            out,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = tx.dims2()?;
        if start > end || end > n {
            return Err(contract(format!(
                "slice_cols {start}..{end} out of range for {:?}",
                tx.shape()
            )));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(m * w);
        for i in 0..m {
            data.extend_from_slice(&tx.row(i)[start..end]);
        }
        let out = Tensor::new(vec![m, w], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SliceCols { x, start }, rg))
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| contract("concat_cols of nothing"))?;
        let (m, _) = self.value(*first).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.value(p).dims2()?;
            if pm != m {
                return Err(Error::Shape {
                    op: "concat_cols",
                    left: self.value(*first).shape().to_vec(),
                    right: self.value(p).shape().to_vec(),
                });
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::new(vec![m, total], data)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Multiplies row `i` of an `m × n` matrix by `w[i]`, where `w` is `m × 1`.
    pub fn scale_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (m, n) = tx.dims2()?;
        if tw.shape() != [m, 1] {
            return Err(Error::Shape {
                op: "scale_rows",
                left: tx.shape().to_vec(),
                right: tw.shape().to_vec(),
            });
        }
        let mut data = tx.data().to_vec();
        for i in 0..m {
            let s = tw.data()[i];
            data[i * n..(i + 1) * n].iter_mut().for_each(|v| *v *= s);
        }
        let out = Tensor::new(vec![m, n], data)?;
        let rg = self.rg(&[x, w]);
        Ok(self.push(out, Op::ScaleRows(x, w), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|v| v * v).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::SumSquares(x), rg)
    }

    /// Mean negative log-likelihood of `labels` under row distributions `probs`.
    pub fn cross_entropy(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let tp = self.value(probs);
        let (b, c) = tp.dims2()?;
        if labels.len() != b {
            return Err(Error::Shape {
                op: "cross_entropy",
                left: tp.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(Error::Index {
                    what: "label",
                    index: y,
                    bound: c,
                });
            }
            total -= tp.data()[i * c + y].max(LOG_FLOOR).ln();
        }
        let loss = if b == 0 { 0.0 } else { total / b as f64 };
        let rg = self.rg(&[probs]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                probs,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Batched multi-head scaled dot-product attention.
    ///
    /// `q`, `k`, `v` are `(batch·seq) × hidden`; `key_mask[b·seq + j]` marks
    /// key `j` of sequence `b` as attendable. Masked keys get exactly zero
    /// weight.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        key_mask: &[bool],
        dims: AttentionDims,
    ) -> Result<Var> {
        let AttentionDims { batch, seq, heads } = dims;
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        same_shape("attention", tq, tk)?;
        same_shape("attention", tq, tv)?;
        let (rows, hidden) = tq.dims2()?;
        if rows != batch * seq || key_mask.len() != rows {
            return Err(Error::Shape {
                op: "attention",
                left: tq.shape().to_vec(),
                right: vec![batch, seq, key_mask.len()],
            });
        }
        if heads == 0 || hidden % heads != 0 {
            return Err(contract(format!(
                "hidden size {hidden} not divisible by {heads} heads"
            )));
        }
        let dh = hidden / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; rows * hidden];
        let mut scores = vec![0.0; seq];
        for b in 0..batch {
            let base = b * seq;
            for h in 0..heads {
                let off = h * dh;
                for i in 0..seq {
                    let qi = &qd[(base + i) * hidden + off..][..dh];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..seq {
                        if key_mask[base + j] {
                            let kj = &kd[(base + j) * hidden + off..][..dh];
                            let s = scale * qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>();
                            scores[j] = s;
                            max = max.max(s);
                        }
                    }
                    let p = &mut probs[((b * heads + h) * seq + i) * seq..][..seq];
                    let mut z = 0.0;
                    for j in 0..seq {
                        if key_mask[base + j] {
                            let e = (scores[j] - max).exp();
                            p[j] = e;
                            z += e;
                        }
                    }
                    if z > 0.0 {
                        p.iter_mut().for_each(|x| *x /= z);
                    }
                    let o = &mut out[(base + i) * hidden + off..][..dh];
                    for j in 0..seq {
                        if p[j] != 0.0 {
                            let vj = &vd[(base + j) * hidden + off..][..dh];
                            for (od, vv) in o.iter_mut().zip(vj) {
                                *od += p[j] * vv;
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![rows, hidden], out)?;
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                dims,
                probs,
            },
            rg,
        ))
    }

    /// Attention probabilities saved by an [`attention`](Self::attention)
    /// node, laid out `[batch][head][query][key]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Back-propagates from a scalar `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes;
        if nodes[loss.0].value.numel() != 1 {
            return Err(contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            backprop_node(&nodes, node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let grads = nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| {
                g.filter(|_| node.requires_grad)
                    .map(|g| Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'a mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]))
}

fn backprop_node(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| &nodes[v.0].value;
    let out = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = val(*a).dims2().expect("matrix");
            let (_, n) = val(*b).dims2().expect("matrix");
            if let Some(ga) = acc(grads, nodes, *a) {
                matmul_nt_into(g, val(*b).data(), ga, m, n, k);
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                matmul_tn_into(val(*a).data(), g, gb, k, m, n);
            }
        }
        Op::Add(a, b) => {
            for v in [a, b] {
                if let Some(gv) = acc(grads, nodes, *v) {
                    gv.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
        }
        Op::AddBias(x, bias) => {
            if let Some(gx) = acc(grads, nodes, *x) {
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
            if let Some(gb) = acc(grads, nodes, *bias) {
                let n = gb.len();
                for row in g.chunks_exact(n) {
                    gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
            }
        }
        Op::Mul(a, b) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                for ((d, gi), bi) in ga.iter_mut().zip(g).zip(val(*b).data()) {
                    *d += gi * bi;
                }
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                for ((d, gi), ai) in gb.iter_mut().zip(g).zip(val(*a).data()) {
                    *d += gi * ai;
                }
            }
        }
        Op::MulConst(x, c) => {
            if let Some(gx) = acc(grads, nodes, *x) {
                for ((d, gi), ci) in gx.iter_mut().zip(g).zip(c) {
                    *d += gi * ci;
                }
            }
        }
        Op::Scale(x, s) => {
            if let Some(gx) = acc(grads, nodes, *x) {
                gx.iter_mut().zip(g).for_each(|(d, gi)| *d += gi * s);
            }
        }
        Op::Reshape(x) => {
            if let Some(gx) = acc(grads, nodes, *x) {
                gx.iter_mut().zip(g).for_each(|(d, gi)| *d += gi);
            }
        }
        Op::Sigmoid(x) => {
            if let Some(gx) = acc(grads, nodes, *x) {
                for ((d, gi), y) in gx.iter_mut().zip(g).zip(out) {
                    *d += gi * y * (1.0 - y);
                }
            }
        }
        Op::Tanh(x) => {
            if let Some(gx) = acc(grads, nodes, *x) {
                for ((d, gi), y) in gx.iter_mut().zip(g).zip(out) {
                    *d += gi * (1.0 - y * y);
                }
            }
        }
        Op::Gelu(x) => {
            let xs = val(*x).data();
            if let Some(gx) = acc(grads, nodes, *x) {
                for ((d, gi), xi) in gx.iter_mut().zip(g).zip(xs) {
                    *d += gi * gelu_grad(*xi);
                }
            }
        }
        Op::Softmax { x, axis } => {
            let (outer, len, inner) = axis_split(node.value.shape(), *axis).expect("axis");
            if let Some(gx) = acc(grads, nodes, *x) {
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |i: usize| (o * len + i) * inner + j;
                        let dot: f64 = (0..len).map(|i| g[idx(i)] * out[idx(i)]).sum();
                        for i in 0..len {
                            gx[idx(i)] += out[idx(i)] * (g[idx(i)] - dot);
                        }
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let n = val(*gamma).numel();
            let gam = val(*gamma).data();
            if let Some(gg) = acc(grads, nodes, *gamma) {
                for (row_g, row_h) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                    for j in 0..n {
                        gg[j] += row_g[j] * row_h[j];
                    }
                }
            }
            if let Some(gb) = acc(grads, nodes, *beta) {
                for row_g in g.chunks_exact(n) {
                    gb.iter_mut().zip(row_g).for_each(|(a, b)| *a += b);
                }
            }
            if let Some(gx) = acc(grads, nodes, *x) {
                let mut dxhat = vec![0.0; n];
                for (i, r) in rstd.iter().enumerate() {
                    let row_g = &g[i * n..(i + 1) * n];
                    let row_h = &xhat[i * n..(i + 1) * n];
                    for j in 0..n {
                        dxhat[j] = row_g[j] * gam[j];
                    }
                    let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                    let mean_dh =
                        dxhat.iter().zip(row_h).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for j in 0..n {
                        gx[i * n + j] += r * (dxhat[j] - mean_d - row_h[j] * mean_dh);
                    }
                }
            }
        }
        Op::GatherRows { x, rows } => {
            let (_, n) = val(*x).dims2().expect("matrix");
            if let Some(gx) = acc(grads, nodes, *x) {
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..n {
                        gx[r * n + j] += g[i * n + j];
                    }
                }
            }
        }
        Op::SliceCols { x, start } => {
            let (m, n) = val(*x).dims2().expect("matrix");
            let w = node.value.shape()[1];
            if let Some(gx) = acc(grads, nodes, *x) {
                for i in 0..m {
                    for j in 0..w {
                        gx[i * n + start + j] += g[i * w + j];
                    }
                }
            }
        }
        Op::ConcatCols(parts) => {
            let total = node.value.shape()[1];
            let m = node.value.shape()[0];
            let mut off = 0;
            for &p in parts {
                let w = val(p).shape()[1];
                if let Some(gp) = acc(grads, nodes, p) {
                    for i in 0..m {
                        for j in 0..w {
                            gp[i * w + j] += g[i * total + off + j];
                        }
                    }
                }
                off += w;
            }
        }
        Op::ScaleRows(x, w) => {
            let (m, n) = val(*x).dims2().expect("matrix");
            let wd = val(*w).data();
            if let Some(gx) = acc(grads, nodes, *x) {
                for i in 0..m {
                    for j in 0..n {
                        gx[i * n + j] += g[i * n + j] * wd[i];
                    }
                }
            }
            let xd = val(*x).data();
            if let Some(gw) = acc(grads, nodes, *w) {
                for i in 0..m {
                    gw[i] += (0..n).map(|j| g[i * n + j] * xd[i * n + j]).sum::<f64>();
                }
            }
        }
        Op::Sum(x) => {
            if let Some(gx) = acc(grads, nodes, *x) {
                gx.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::SumSquares(x) => {
            let xd = val(*x).data();
            if let Some(gx) = acc(grads, nodes, *x) {
                for (d, xi) in gx.iter_mut().zip(xd) {
                    *d += 2.0 * xi * g[0];
                }
            }
        }
        Op::CrossEntropy { probs, labels } => {
            let (b, c) = val(*probs).dims2().expect("matrix");
            let pd = val(*probs).data();
            if let Some(gp) = acc(grads, nodes, *probs) {
                for (i, &y) in labels.iter().enumerate() {
                    let p = pd[i * c + y];
                    if p >= LOG_FLOOR {
                        gp[i * c + y] -= g[0] / (b as f64 * p);
                    }
                }
            }
        }
        Op::Attention {
            q,
            k,
            v,
            dims,
            probs,
        } => attention_backward(nodes, grads, g, (*q, *k, *v), *dims, probs),
    }
}

fn attention_backward(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    g: &[f64],
    (q, k, v): (Var, Var, Var),
    dims: AttentionDims,
    probs: &[f64],
) {
    let AttentionDims { batch, seq, heads } = dims;
    let qd = nodes[q.0].value.data();
    let kd = nodes[k.0].value.data();
    let vd = nodes[v.0].value.data();
    let hidden = nodes[q.0].value.shape()[1];
    let dh = hidden / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let rows = batch * seq;

    let mut gq = vec![0.0; rows * hidden];
    let mut gk = vec![0.0; rows * hidden];
    let mut gv = vec![0.0; rows * hidden];
    let mut dp = vec![0.0; seq];
    for b in 0..batch {
        let base = b * seq;
        for h in 0..heads {
            let off = h * dh;
            for i in 0..seq {
                let p = &probs[((b * heads + h) * seq + i) * seq..][..seq];
                let gi = &g[(base + i) * hidden + off..][..dh];
                let mut dot = 0.0;
                for j in 0..seq {
                    if p[j] == 0.0 {
                        dp[j] = 0.0;
                        continue;
                    }
                    let vj = &vd[(base + j) * hidden + off..][..dh];
                    dp[j] = gi.iter().zip(vj).map(|(x, y)| x * y).sum();
                    dot += p[j] * dp[j];
                    let gvj = &mut gv[(base + j) * hidden + off..][..dh];
                    for (d, x) in gvj.iter_mut().zip(gi) {
                        *d += p[j] * x;
                    }
                }
                let qi = &qd[(base + i) * hidden + off..][..dh];
                for j in 0..seq {
                    if p[j] == 0.0 {
                        continue;
                    }
                    let ds = scale * p[j] * (dp[j] - dot);
                    let kj = &kd[(base + j) * hidden + off..][..dh];
                    let gqi = &mut gq[(base + i) * hidden + off..][..dh];
                    for (d, x) in gqi.iter_mut().zip(kj) {
                        *d += ds * x;
                    }
                    let gkj = &mut gk[(base + j) * hidden + off..][..dh];
                    for (d, x) in gkj.iter_mut().zip(qi) {
                        *d += ds * x;
                    }
                }
            }
        }
    }
    for (var, local) in [(q, gq), (k, gk), (v, gv)] {
        if let Some(dst) = acc(grads, nodes, var) {
            dst.iter_mut().zip(&local).for_each(|(a, b)| *a += b);
        }
    }
}
