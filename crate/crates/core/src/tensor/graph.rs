//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Each operation records
//! its output value together with whatever it needs for the backward pass;
//! [`Graph::backward`] walks the tape in reverse and returns gradients keyed
//! by [`ParamId`]. A parameter used at several places (the tied embedding
//! and output projection) is a single leaf, so its gradient contributions
//! add up.

use std::sync::Arc;

use super::{
    dropout_forward, gelu_grad, gemm, layer_norm_forward, softmax_in_place,
    ParamId, ParamStore, RngState, Tensor,
};
use crate::attention::Mask;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// One independent attention problem inside a stacked `[rows × d_k]` input:
/// rows `offset..offset + len`, with an optional mask over `len × len`
/// query/key pairs.
#[derive(Clone, Debug)]
pub struct AttnBlock {
    pub offset: usize,
    pub len: usize,
    pub mask: Option<Arc<Mask>>,
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        bias: Var,
    },
    Dropout {
        x: Var,
        mask: Option<Vec<f64>>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        blocks: Arc<[AttnBlock]>,
        probs: Vec<Vec<f64>>,
    },
    Nll {
        log_probs: Var,
        picks: Vec<(usize, usize)>,
    },
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients of a scalar loss with respect to every parameter of the store
/// the graph was built on. Parameters the loss does not reach are `None`.
#[derive(Clone, Debug)]
pub struct Gradients(Vec<Option<Tensor>>);

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.0[id.0].as_ref()
    }

    pub fn iter(&self) -> impl Iterator<Item = Option<&Tensor>> {
        self.0.iter().map(Option::as_ref)
    }
}

pub struct Graph<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A non-trainable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// The leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(self.store.value(id).clone(), Op::Param(id));
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_t(self.value(b))?;
        Ok(self.push(out, Op::MatMulT(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape {
                op: "add",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Adds the vector `bias` to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let (_, c) = tx.dims2();
        if tb.numel() != c {
            return Err(Error::Shape {
                op: "add_row",
                lhs: tx.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let b = tb.data();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i % c])
            .collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddRow(x, bias)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).gelu();
        self.push(out, Op::Gelu(x))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (out, xhat, inv_std) =
            layer_norm_forward(self.value(x), self.value(gain), self.value(bias), eps)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                xhat,
                inv_std,
                bias,
            },
        ))
    }

    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut RngState, training: bool) -> Result<Var> {
        let (out, mask) = dropout_forward(self.value(x), p, rng, training)?;
        Ok(self.push(out, Op::Dropout { x, mask }))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let out = self.value(x).softmax_rows();
        self.push(out, Op::Softmax(x))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let out = self.value(x).log_softmax_rows();
        self.push(out, Op::LogSoftmax(x))
    }

    /// Gathers rows `ids` of `table`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (v, d) = t.dims2();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Vocab { id, size: v });
            }
            data.extend_from_slice(t.row(id));
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.dims2();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return Err(Error::Shape {
                    op: "select_rows",
                    lhs: t.shape().to_vec(),
                    rhs: vec![i],
                });
            }
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(vec![rows.len(), c], data)?;
        Ok(self.push(
            out,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        if let Some(&bad) = parts.iter().find(|&&p| self.value(p).rows() != rows) {
            return Err(Error::Shape {
                op: "concat_cols",
                lhs: self.value(parts[0]).shape().to_vec(),
                rhs: self.value(bad).shape().to_vec(),
            });
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    /// Scaled dot-product attention `softmax(QKᵀ/√d_k + mask)·V`, evaluated
    /// independently within each block of rows. Forbidden query/key pairs
    /// receive exactly zero weight.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, blocks: Arc<[AttnBlock]>) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (rows, dk) = tq.dims2();
        if tk.dims2() != (rows, dk) || tv.rows() != rows {
            return Err(Error::Shape {
                op: "attention",
                lhs: tq.shape().to_vec(),
                rhs: tk.shape().to_vec(),
            });
        }
        let dv = tv.cols();
        let scale = 1.0 / (dk as f64).sqrt();
        let mut out = vec![0.0; rows * dv];
        let mut probs = Vec::with_capacity(blocks.len());
        for b in blocks.iter() {
            if b.offset + b.len > rows || b.mask.as_ref().is_some_and(|m| m.len() != b.len) {
                return Err(Error::Shape {
                    op: "attention block",
                    lhs: vec![b.offset, b.len],
                    rhs: vec![rows],
                });
            }
            let n = b.len;
            let mut p = vec![0.0; n * n];
            for i in 0..n {
                let qi = tq.row(b.offset + i);
                let row = &mut p[i * n..(i + 1) * n];
                for (j, s) in row.iter_mut().enumerate() {
                    let allowed = b.mask.as_ref().is_none_or(|m| m.allowed(i, j));
                    *s = if allowed {
                        let kj = tk.row(b.offset + j);
                        qi.iter().zip(kj).map(|(a, c)| a * c).sum::<f64>() * scale
                    } else {
                        f64::NEG_INFINITY
                    };
                }
                softmax_in_place(row);
                let o = &mut out[(b.offset + i) * dv..(b.offset + i + 1) * dv];
                for (j, &w) in row.iter().enumerate() {
                    if w != 0.0 {
                        for (acc, x) in o.iter_mut().zip(tv.row(b.offset + j)) {
                            *acc += w * x;
                        }
                    }
                }
            }
            probs.push(p);
        }
        let out = Tensor::new(vec![rows, dv], out)?;
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                blocks,
                probs,
            },
        ))
    }

    /// Attention weights recorded by an [`Graph::attention`] node, one
    /// `len × len` row-major matrix per block.
    pub fn attention_weights(&self, node: Var) -> Option<&[Vec<f64>]> {
        match &self.nodes[node.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Mean of `-log_probs[row, target]` over `picks`.
    pub fn nll(&mut self, log_probs: Var, picks: &[(usize, usize)]) -> Result<Var> {
        if picks.is_empty() {
            return Err(Error::NoTargets);
        }
        let t = self.value(log_probs);
        let (r, c) = t.dims2();
        let mut total = 0.0;
        for &(i, target) in picks {
            if target >= c {
                return Err(Error::Vocab {
                    id: target,
                    size: c,
                });
            }
            if i >= r {
                return Err(Error::Shape {
                    op: "nll",
                    lhs: t.shape().to_vec(),
                    rhs: vec![i],
                });
            }
            total -= t.get(i, target);
        }
        let out = Tensor::scalar(total / picks.len() as f64);
        Ok(self.push(
            out,
            Op::Nll {
                log_probs,
                picks: picks.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::NonScalar(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = vec![None; self.store.len()];

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    out[id.0] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                }
                Op::MatMul(a, b) => {
                    let (m, k) = self.value(*a).dims2();
                    let n = self.value(*b).cols();
                    let bv = self.value(*b).data();
                    let av = self.value(*a).data();
                    // dA = G·Bᵀ, dB = Aᵀ·G
                    gemm(m, n, k, &g, (n, 1), bv, (1, n), slot(&mut grads, *a, m * k), true);
                    gemm(k, m, n, av, (1, k), &g, (n, 1), slot(&mut grads, *b, k * n), true);
                }
                Op::MatMulT(a, b) => {
                    let (m, k) = self.value(*a).dims2();
                    let n = self.value(*b).rows();
                    let bv = self.value(*b).data();
                    let av = self.value(*a).data();
                    // dA = G·B, dB = Gᵀ·A
                    gemm(m, n, k, &g, (n, 1), bv, (k, 1), slot(&mut grads, *a, m * k), true);
                    gemm(n, m, k, &g, (1, n), av, (k, 1), slot(&mut grads, *b, n * k), true);
                }
                Op::Add(a, b) => {
                    add_into(slot(&mut grads, *a, g.len()), &g);
                    add_into(slot(&mut grads, *b, g.len()), &g);
                }
                Op::AddRow(x, bias) => {
                    add_into(slot(&mut grads, *x, g.len()), &g);
                    let c = self.value(*bias).numel();
                    let gb = slot(&mut grads, *bias, c);
                    for row in g.chunks(c) {
                        add_into(gb, row);
                    }
                }
                Op::Scale(x, c) => {
                    let gx = slot(&mut grads, *x, g.len());
                    for (acc, v) in gx.iter_mut().zip(&g) {
                        *acc += c * v;
                    }
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x).data();
                    let gx = slot(&mut grads, *x, g.len());
                    for ((acc, v), xi) in gx.iter_mut().zip(&g).zip(xv) {
                        *acc += v * gelu_grad(*xi);
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    xhat,
                    inv_std,
                    bias,
                } => {
                    let d = self.value(*gain).numel();
                    let gain_v = self.value(*gain).data().to_vec();
                    {
                        let gg = slot(&mut grads, *gain, d);
                        for (row_g, row_h) in g.chunks(d).zip(xhat.chunks(d)) {
                            for j in 0..d {
                                gg[j] += row_g[j] * row_h[j];
                            }
                        }
                    }
                    {
                        let gb = slot(&mut grads, *bias, d);
                        for row_g in g.chunks(d) {
                            add_into(gb, row_g);
                        }
                    }
                    let gx = slot(&mut grads, *x, g.len());
                    let mut dxhat = vec![0.0; d];
                    for (r, (row_g, row_h)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        for j in 0..d {
                            dxhat[j] = row_g[j] * gain_v[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dh =
                            dxhat.iter().zip(row_h).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        let inv = inv_std[r];
                        let dst = &mut gx[r * d..(r + 1) * d];
                        for j in 0..d {
                            dst[j] += inv * (dxhat[j] - mean_d - row_h[j] * mean_dh);
                        }
                    }
                }
                Op::Dropout { x, mask } => {
                    let gx = slot(&mut grads, *x, g.len());
                    match mask {
                        Some(m) => {
                            for ((acc, v), s) in gx.iter_mut().zip(&g).zip(m) {
                                *acc += v * s;
                            }
                        }
                        None => add_into(gx, &g),
                    }
                }
                Op::Softmax(x) => {
                    let c = node.value.cols();
                    let gx = slot(&mut grads, *x, g.len());
                    for (r, (row_g, row_y)) in g.chunks(c).zip(node.value.data().chunks(c)).enumerate() {
                        let dot: f64 = row_g.iter().zip(row_y).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gx[r * c + j] += row_y[j] * (row_g[j] - dot);
                        }
                    }
                }
                Op::LogSoftmax(x) => {
                    let c = node.value.cols();
                    let gx = slot(&mut grads, *x, g.len());
                    for (r, (row_g, row_y)) in g.chunks(c).zip(node.value.data().chunks(c)).enumerate() {
                        let total: f64 = row_g.iter().sum();
                        for j in 0..c {
                            gx[r * c + j] += row_g[j] - row_y[j].exp() * total;
                        }
                    }
                }
                Op::Embedding { table, ids } => {
                    let t = self.value(*table);
                    let d = t.cols();
                    let gt = slot(&mut grads, *table, t.numel());
                    for (row_g, &id) in g.chunks(d).zip(ids) {
                        add_into(&mut gt[id * d..(id + 1) * d], row_g);
                    }
                }
                Op::SelectRows { x, rows } => {
                    let t = self.value(*x);
                    let c = t.cols();
                    let gx = slot(&mut grads, *x, t.numel());
                    for (row_g, &i) in g.chunks(c).zip(rows) {
                        add_into(&mut gx[i * c..(i + 1) * c], row_g);
                    }
                }
                Op::ConcatCols(parts) => {
                    let total = node.value.cols();
                    let mut start = 0;
                    for &p in parts {
                        let (r, c) = self.value(p).dims2();
                        let gp = slot(&mut grads, p, r * c);
                        for i in 0..r {
                            add_into(
                                &mut gp[i * c..(i + 1) * c],
                                &g[i * total + start..i * total + start + c],
                            );
                        }
                        start += c;
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    blocks,
                    probs,
                } => {
                    self.attention_backward(&mut grads, &g, (*q, *k, *v), blocks, probs);
                }
                Op::Nll { log_probs, picks } => {
                    let t = self.value(*log_probs);
                    let c = t.cols();
                    let gl = slot(&mut grads, *log_probs, t.numel());
                    let w = g[0] / picks.len() as f64;
                    for &(i, target) in picks {
                        gl[i * c + target] -= w;
                    }
                }
                Op::Sum(x) => {
                    let n = self.value(*x).numel();
                    let gx = slot(&mut grads, *x, n);
                    for acc in gx.iter_mut() {
                        *acc += g[0];
                    }
                }
            }
        }
        Ok(Gradients(out))
    }

    fn attention_backward(
        &self,
        grads: &mut [Option<Vec<f64>>],
        g: &[f64],
        (q, k, v): (Var, Var, Var),
        blocks: &[AttnBlock],
        probs: &[Vec<f64>],
    ) {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (rows, dk) = tq.dims2();
        let dv = tv.cols();
        let scale = 1.0 / (dk as f64).sqrt();
        let mut dq = vec![0.0; rows * dk];
        let mut dkey = vec![0.0; rows * dk];
        let mut dval = vec![0.0; rows * dv];
        for (b, p) in blocks.iter().zip(probs) {
            let n = b.len;
            let o = b.offset;
            let mut ds = vec![0.0; n];
            for i in 0..n {
                let go = &g[(o + i) * dv..(o + i + 1) * dv];
                let prow = &p[i * n..(i + 1) * n];
                // dP[i, j] = dO[i]·V[j]; dS = P ⊙ (dP − Σ P·dP)
                let mut dot = 0.0;
                for j in 0..n {
                    if prow[j] == 0.0 {
                        ds[j] = 0.0;
                        continue;
                    }
                    let vj = tv.row(o + j);
                    let dp: f64 = go.iter().zip(vj).map(|(a, c)| a * c).sum();
                    ds[j] = dp;
                    dot += prow[j] * dp;
                    let dvj = &mut dval[(o + j) * dv..(o + j + 1) * dv];
                    for (acc, x) in dvj.iter_mut().zip(go) {
                        *acc += prow[j] * x;
                    }
                }
                let qi = tq.row(o + i);
                for j in 0..n {
                    if prow[j] == 0.0 {
                        continue;
                    }
                    let s = prow[j] * (ds[j] - dot) * scale;
                    let kj = tk.row(o + j);
                    let dqi = &mut dq[(o + i) * dk..(o + i + 1) * dk];
                    for (acc, x) in dqi.iter_mut().zip(kj) {
                        *acc += s * x;
                    }
                    let dkj = &mut dkey[(o + j) * dk..(o + j + 1) * dk];
                    for (acc, x) in dkj.iter_mut().zip(qi) {
                        *acc += s * x;
                    }
                }
            }
        }
        add_into(slot(grads, q, rows * dk), &dq);
        add_into(slot(grads, k, rows * dk), &dkey);
        add_into(slot(grads, v, rows * dv), &dval);
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, n: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}
