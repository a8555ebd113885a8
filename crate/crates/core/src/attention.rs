//! Self-attention building blocks: scaled dot-product attention, per-head
//! projections, the causal mask, the position-wise feed-forward network and
//! the full post-norm SAN layer.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{AttnBlock, Graph, ParamId, ParamStore, RngState, Tensor, Var, LAYER_NORM_EPS};

/// Square matrix of allowed query/key pairs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    n: usize,
    allowed: Vec<bool>,
}

impl Mask {
    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                allowed.push(f(i, j));
            }
        }
        Self { n, allowed }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn allowed(&self, query: usize, key: usize) -> bool {
        self.allowed[query * self.n + key]
    }

    pub fn count_allowed(&self) -> usize {
        self.allowed.iter().filter(|&&a| a).count()
    }
}

/// Forbids every query position `i` from attending to keys `j > i`.
pub fn causal_mask(n: usize) -> Result<Mask> {
    if n == 0 {
        return Err(Error::Param("causal mask needs n >= 1".into()));
    }
    Ok(Mask::from_fn(n, |i, j| j <= i))
}

/// Mask for a padded row block of width `width` holding a sequence of
/// `len` real tokens: padding keys are forbidden, and with `causal` so are
/// future keys. Returns `None` when nothing is forbidden.
pub fn block_mask(width: usize, len: usize, causal: bool) -> Option<Mask> {
    if !causal && len == width {
        return None;
    }
    Some(Mask::from_fn(width, |i, j| j < len && (!causal || j <= i)))
}

/// Attention blocks for a single unpadded sequence.
pub fn single_block(n: usize, mask: Option<Mask>) -> Arc<[AttnBlock]> {
    Arc::from(vec![AttnBlock {
        offset: 0,
        len: n,
        mask: mask.map(Arc::new),
    }])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
}

impl AttentionConfig {
    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.num_heads == 0 || self.ffn_dim == 0 {
            return Err(Error::Param("attention dimensions must be positive".into()));
        }
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Param(format!(
                "model_dim {} is not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Param(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Parameter handles of one SAN layer. Query, key and value projections are
/// kept per head, each `d × d_k`.
#[derive(Clone, Debug)]
pub struct SanLayerParams {
    pub query: Vec<ParamId>,
    pub key: Vec<ParamId>,
    pub value: Vec<ParamId>,
    pub output: ParamId,
    pub ffn_in: ParamId,
    pub ffn_in_bias: ParamId,
    pub ffn_out: ParamId,
    pub ffn_out_bias: ParamId,
    pub norm1_gain: ParamId,
    pub norm1_bias: ParamId,
    pub norm2_gain: ParamId,
    pub norm2_bias: ParamId,
}

impl SanLayerParams {
    /// Registers a layer's parameters under `prefix`. Weights are drawn from
    /// a normal with std 0.02 truncated at two std; biases start at zero and
    /// layer-norm gains at one.
    pub fn init(store: &mut ParamStore, prefix: &str, cfg: &AttentionConfig, rng: &mut RngState) -> Self {
        let d = cfg.model_dim;
        let dk = cfg.head_dim();
        let mut weight = |store: &mut ParamStore, name: String, rows: usize, cols: usize| {
            let data = (0..rows * cols).map(|_| rng.truncated_normal(0.02)).collect();
            store.add(name, Tensor::new(vec![rows, cols], data).expect("shape"))
        };
        let mut query = Vec::new();
        let mut key = Vec::new();
        let mut value = Vec::new();
        for h in 0..cfg.num_heads {
            query.push(weight(store, format!("{prefix}.head{h}.query"), d, dk));
            key.push(weight(store, format!("{prefix}.head{h}.key"), d, dk));
            value.push(weight(store, format!("{prefix}.head{h}.value"), d, dk));
        }
        let output = weight(store, format!("{prefix}.output"), dk * cfg.num_heads, d);
        let ffn_in = weight(store, format!("{prefix}.ffn.in"), d, cfg.ffn_dim);
        let ffn_out = weight(store, format!("{prefix}.ffn.out"), cfg.ffn_dim, d);
        Self {
            query,
            key,
            value,
            output,
            ffn_in,
            ffn_in_bias: store.add(format!("{prefix}.ffn.in_bias"), Tensor::zeros(&[cfg.ffn_dim])),
            ffn_out,
            ffn_out_bias: store.add(format!("{prefix}.ffn.out_bias"), Tensor::zeros(&[d])),
            norm1_gain: store.add(format!("{prefix}.norm1.gain"), Tensor::full(&[d], 1.0)),
            norm1_bias: store.add(format!("{prefix}.norm1.bias"), Tensor::zeros(&[d])),
            norm2_gain: store.add(format!("{prefix}.norm2.gain"), Tensor::full(&[d], 1.0)),
            norm2_bias: store.add(format!("{prefix}.norm2.bias"), Tensor::zeros(&[d])),
        }
    }

    pub fn num_heads(&self) -> usize {
        self.query.len()
    }
}

/// `softmax(QKᵀ/√d_k)V` for one sequence, with forbidden cells of `mask`
/// set to −∞ before the softmax.
pub fn scaled_dot_attention(g: &mut Graph, q: Var, k: Var, v: Var, mask: Option<&Mask>) -> Result<Var> {
    let n = g.value(q).rows();
    for other in [k, v] {
        if g.value(other).rows() != n {
            return Err(Error::Shape {
                op: "scaled_dot_attention",
                lhs: g.value(q).shape().to_vec(),
                rhs: g.value(other).shape().to_vec(),
            });
        }
    }
    if let Some(m) = mask {
        if m.len() != n {
            return Err(Error::Shape {
                op: "scaled_dot_attention mask",
                lhs: vec![n, n],
                rhs: vec![m.len(), m.len()],
            });
        }
    }
    g.attention(q, k, v, single_block(n, mask.cloned()))
}

/// `Concat(head_1, …, head_h)·W^O` with `head_i = Attention(xW_i^Q, xW_i^K, xW_i^V)`.
pub fn multi_head(g: &mut Graph, x: Var, params: &SanLayerParams, blocks: &Arc<[AttnBlock]>) -> Result<Var> {
    let mut heads = Vec::with_capacity(params.num_heads());
    for h in 0..params.num_heads() {
        let wq = g.param(params.query[h]);
        let wk = g.param(params.key[h]);
        let wv = g.param(params.value[h]);
        let q = g.matmul(x, wq)?;
        let k = g.matmul(x, wk)?;
        let v = g.matmul(x, wv)?;
        heads.push(g.attention(q, k, v, Arc::clone(blocks))?);
    }
    let concat = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)?
    };
    let wo = g.param(params.output);
    g.matmul(concat, wo)
}

/// `gelu(xW₁ + b₁)W₂ + b₂`, applied to every row.
pub fn feed_forward(g: &mut Graph, x: Var, params: &SanLayerParams) -> Result<Var> {
    let w1 = g.param(params.ffn_in);
    let b1 = g.param(params.ffn_in_bias);
    let w2 = g.param(params.ffn_out);
    let b2 = g.param(params.ffn_out_bias);
    let h = g.matmul(x, w1)?;
    let h = g.add_row(h, b1)?;
    let h = g.gelu(h);
    let h = g.matmul(h, w2)?;
    g.add_row(h, b2)
}

/// Post-norm SAN layer:
/// `u = LN(x + Dropout(MultiHead(x)))`, `out = LN(u + Dropout(FFN(u)))`.
///
/// `rng` selects the mode: `Some` trains with dropout, `None` is inference.
pub fn san_layer(
    g: &mut Graph,
    x: Var,
    params: &SanLayerParams,
    dropout: f64,
    blocks: &Arc<[AttnBlock]>,
    mut rng: Option<&mut RngState>,
) -> Result<Var> {
    let attn = multi_head(g, x, params, blocks)?;
    let attn = apply_dropout(g, attn, dropout, rng.as_deref_mut())?;
    let u = g.add(x, attn)?;
    let (g1, b1) = (g.param(params.norm1_gain), g.param(params.norm1_bias));
    let u = g.layer_norm(u, g1, b1, LAYER_NORM_EPS)?;

    let ff = feed_forward(g, u, params)?;
    let ff = apply_dropout(g, ff, dropout, rng)?;
    let out = g.add(u, ff)?;
    let (g2, b2) = (g.param(params.norm2_gain), g.param(params.norm2_bias));
    g.layer_norm(out, g2, b2, LAYER_NORM_EPS)
}

fn apply_dropout(g: &mut Graph, x: Var, p: f64, rng: Option<&mut RngState>) -> Result<Var> {
    match rng {
        Some(r) if p > 0.0 => g.dropout(x, p, r, true),
        _ => Ok(x),
    }
}
