//! Post-norm Transformer blocks over a single sequence.

use serde::{Deserialize, Serialize};

use crate::diff::{Float, Graph, Initializer, ParameterStore, Var};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub n_layers: usize,
    pub hidden: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
}

impl TransformerConfig {
    pub fn validate(&self, what: &str) -> Result<()> {
        if self.n_layers == 0 || self.hidden == 0 || self.n_heads == 0 || self.ffn_dim == 0 {
            return Err(Error::config(format!("{what}: layer sizes must be positive")));
        }
        if self.hidden % self.n_heads != 0 {
            return Err(Error::config(format!(
                "{what}: hidden {} is not divisible by {} heads",
                self.hidden, self.n_heads
            )));
        }
        Ok(())
    }
}

pub fn init_linear<T: Float>(store: &mut ParameterStore<T>, init: &mut Initializer, prefix: &str, fan_in: usize, fan_out: usize) -> Result<()> {
    store.insert(format!("{prefix}.w"), init.weight(fan_in, fan_out))?;
    store.insert(format!("{prefix}.b"), init.zeros(fan_out))
}

/// `x @ w + b` for `x` of shape `[d]` or `[L, d]`.
pub fn linear<T: Float>(g: &mut Graph<T>, store: &ParameterStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let w = g.param(store, &format!("{prefix}.w"))?;
    let b = g.param(store, &format!("{prefix}.b"))?;
    let xw = g.matmul(x, w)?;
    g.add(xw, b)
}

fn init_layer_norm<T: Float>(store: &mut ParameterStore<T>, init: &mut Initializer, prefix: &str, dim: usize) -> Result<()> {
    store.insert(format!("{prefix}.gamma"), init.ones(dim))?;
    store.insert(format!("{prefix}.beta"), init.zeros(dim))
}

pub fn layer_norm<T: Float>(g: &mut Graph<T>, store: &ParameterStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let gamma = g.param(store, &format!("{prefix}.gamma"))?;
    let beta = g.param(store, &format!("{prefix}.beta"))?;
    g.layer_norm(x, gamma, beta, LAYER_NORM_EPS)
}

fn init_attention<T: Float>(store: &mut ParameterStore<T>, init: &mut Initializer, prefix: &str, hidden: usize) -> Result<()> {
    for p in ["q", "k", "v", "o"] {
        init_linear(store, init, &format!("{prefix}.{p}"), hidden, hidden)?;
    }
    Ok(())
}

/// Output of one multi-head attention call.
pub struct Attention {
    pub out: Var,
    /// Per-head attention probabilities, each `[Lq, Lk]`.
    pub probs: Vec<Var>,
}

/// Multi-head scaled dot-product attention. `mask` is `Lq * Lk`, row-major;
/// false entries receive zero weight.
pub fn attention<T: Float>(
    g: &mut Graph<T>,
    store: &ParameterStore<T>,
    prefix: &str,
    n_heads: usize,
    queries: Var,
    keys: Var,
    mask: &[bool],
) -> Result<Attention> {
    let hidden = g.value(queries).cols();
    let lq = g.value(queries).rows();
    let lk = g.value(keys).rows();
    if mask.len() != lq * lk {
        return Err(Error::contract("attention mask must be Lq x Lk"));
    }
    let q = linear(g, store, &format!("{prefix}.q"), queries)?;
    let k = linear(g, store, &format!("{prefix}.k"), keys)?;
    let v = linear(g, store, &format!("{prefix}.v"), keys)?;
    let dh = hidden / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (qh, kh, vh) = if n_heads == 1 {
            (q, k, v)
        } else {
            (g.slice_cols(q, h * dh, dh)?, g.slice_cols(k, h * dh, dh)?, g.slice_cols(v, h * dh, dh)?)
        };
        let scores = g.matmul_nt(qh, kh)?;
        let scores = g.scale(scores, scale)?;
        let p = g.softmax(scores, Some(mask))?;
        heads.push(g.matmul(p, vh)?);
        probs.push(p);
    }
    let merged = if n_heads == 1 { heads[0] } else { g.concat_last(&heads)? };
    let out = linear(g, store, &format!("{prefix}.o"), merged)?;
    Ok(Attention { out, probs })
}

fn feed_forward<T: Float>(g: &mut Graph<T>, store: &ParameterStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(g, store, &format!("{prefix}.in"), x)?;
    let h = g.relu(h)?;
    linear(g, store, &format!("{prefix}.out"), h)
}

fn residual_norm<T: Float>(g: &mut Graph<T>, store: &ParameterStore<T>, prefix: &str, x: Var, delta: Var) -> Result<Var> {
    let s = g.add(x, delta)?;
    layer_norm(g, store, prefix, s)
}

pub fn init_encoder_stack<T: Float>(store: &mut ParameterStore<T>, init: &mut Initializer, prefix: &str, cfg: &TransformerConfig) -> Result<()> {
    cfg.validate(prefix)?;
    for l in 0..cfg.n_layers {
        let p = format!("{prefix}.layer{l}");
        init_attention(store, init, &format!("{p}.attn"), cfg.hidden)?;
        init_layer_norm(store, init, &format!("{p}.ln1"), cfg.hidden)?;
        init_linear(store, init, &format!("{p}.ffn.in"), cfg.hidden, cfg.ffn_dim)?;
        init_linear(store, init, &format!("{p}.ffn.out"), cfg.ffn_dim, cfg.hidden)?;
        init_layer_norm(store, init, &format!("{p}.ln2"), cfg.hidden)?;
    }
    Ok(())
}

/// Self-attention stack over `x[L, hidden]`. Returns the final states and
/// the last layer's per-head attention probabilities.
pub fn encoder_stack<T: Float>(
    g: &mut Graph<T>,
    store: &ParameterStore<T>,
    prefix: &str,
    cfg: &TransformerConfig,
    mut x: Var,
    mask: &[bool],
) -> Result<(Var, Vec<Var>)> {
    let mut last = Vec::new();
    for l in 0..cfg.n_layers {
        let p = format!("{prefix}.layer{l}");
        let att = attention(g, store, &format!("{p}.attn"), cfg.n_heads, x, x, mask)?;
        x = residual_norm(g, store, &format!("{p}.ln1"), x, att.out)?;
        let ff = feed_forward(g, store, &format!("{p}.ffn"), x)?;
        x = residual_norm(g, store, &format!("{p}.ln2"), x, ff)?;
        last = att.probs;
    }
    Ok((x, last))
}

pub fn init_decoder_stack<T: Float>(store: &mut ParameterStore<T>, init: &mut Initializer, prefix: &str, cfg: &TransformerConfig) -> Result<()> {
    cfg.validate(prefix)?;
    for l in 0..cfg.n_layers {
        let p = format!("{prefix}.layer{l}");
        init_attention(store, init, &format!("{p}.self_attn"), cfg.hidden)?;
        init_layer_norm(store, init, &format!("{p}.ln1"), cfg.hidden)?;
        init_attention(store, init, &format!("{p}.cross_attn"), cfg.hidden)?;
        init_layer_norm(store, init, &format!("{p}.ln2"), cfg.hidden)?;
        init_linear(store, init, &format!("{p}.ffn.in"), cfg.hidden, cfg.ffn_dim)?;
        init_linear(store, init, &format!("{p}.ffn.out"), cfg.ffn_dim, cfg.hidden)?;
        init_layer_norm(store, init, &format!("{p}.ln3"), cfg.hidden)?;
    }
    Ok(())
}

/// Causal self-attention over `y[T, hidden]` plus cross-attention into
/// `memory[S, hidden]`.
pub fn decoder_stack<T: Float>(
    g: &mut Graph<T>,
    store: &ParameterStore<T>,
    prefix: &str,
    cfg: &TransformerConfig,
    mut y: Var,
    memory: Var,
) -> Result<Var> {
    let t = g.value(y).rows();
    let s = g.value(memory).rows();
    let causal: Vec<bool> = (0..t * t).map(|i| i % t <= i / t).collect();
    let cross = vec![true; t * s];
    for l in 0..cfg.n_layers {
        let p = format!("{prefix}.layer{l}");
        let sa = attention(g, store, &format!("{p}.self_attn"), cfg.n_heads, y, y, &causal)?;
        y = residual_norm(g, store, &format!("{p}.ln1"), y, sa.out)?;
        let ca = attention(g, store, &format!("{p}.cross_attn"), cfg.n_heads, y, memory, &cross)?;
        y = residual_norm(g, store, &format!("{p}.ln2"), y, ca.out)?;
        let ff = feed_forward(g, store, &format!("{p}.ffn"), y)?;
        y = residual_norm(g, store, &format!("{p}.ln3"), y, ff)?;
    }
    Ok(y)
}
