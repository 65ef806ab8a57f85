use serde::{Deserialize, Serialize};

use crate::data::vocab::PAD;
use crate::diff::{Float, Graph, Initializer, ParameterStore, Tensor, Var};
use crate::encoders::transformer::{encoder_stack, init_encoder_stack, init_linear, linear, TransformerConfig};
use crate::error::{Error, Result};

/// Transformer text encoder: learned token and position embeddings, a
/// self-attention stack, and (for pooled use) a mean pool plus a linear
/// layer to `output_dim`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextEncoderConfig {
    pub n_layers: usize,
    pub hidden: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub output_dim: usize,
    /// Candidates go through the dialogue encoder's weights, final linear
    /// layer included.
    pub shared_response_encoder: bool,
}

impl TextEncoderConfig {
    pub fn retrieval_default(vocab_size: usize) -> Self {
        TextEncoderConfig {
            n_layers: 4,
            hidden: 300,
            n_heads: 6,
            ffn_dim: 1200,
            max_len: 64,
            vocab_size,
            output_dim: 500,
            shared_response_encoder: false,
        }
    }

    pub fn stack(&self) -> TransformerConfig {
        TransformerConfig { n_layers: self.n_layers, hidden: self.hidden, n_heads: self.n_heads, ffn_dim: self.ffn_dim }
    }

    pub fn validate(&self) -> Result<()> {
        self.stack().validate("text encoder")?;
        if self.max_len == 0 || self.vocab_size == 0 || self.output_dim == 0 {
            return Err(Error::config("text encoder: max_len, vocab_size and output_dim must be positive"));
        }
        Ok(())
    }
}

pub fn init_text_encoder<T: Float>(
    store: &mut ParameterStore<T>,
    init: &mut Initializer,
    prefix: &str,
    cfg: &TextEncoderConfig,
    with_output: bool,
) -> Result<()> {
    cfg.validate()?;
    store.insert(format!("{prefix}.tok_emb"), init.embedding(cfg.vocab_size, cfg.hidden))?;
    store.insert(format!("{prefix}.pos_emb"), init.embedding(cfg.max_len, cfg.hidden))?;
    init_encoder_stack(store, init, &format!("{prefix}.stack"), &cfg.stack())?;
    if with_output {
        init_linear(store, init, &format!("{prefix}.out"), cfg.hidden, cfg.output_dim)?;
    }
    Ok(())
}

/// Contextual states `[L, hidden]` and the non-pad mask.
pub fn encode_states<T: Float>(
    g: &mut Graph<T>,
    store: &ParameterStore<T>,
    prefix: &str,
    cfg: &TextEncoderConfig,
    tokens: &[u32],
) -> Result<(Var, Vec<bool>)> {
    if tokens.is_empty() {
        return Err(Error::contract("text encoder input is empty"));
    }
    if tokens.len() > cfg.max_len {
        return Err(Error::contract(format!("sequence of {} tokens exceeds max_len {}", tokens.len(), cfg.max_len)));
    }
    for &t in tokens {
        if t as usize >= cfg.vocab_size {
            return Err(Error::Vocabulary { id: t, size: cfg.vocab_size });
        }
    }
    let active: Vec<bool> = tokens.iter().map(|&t| t != PAD).collect();
    if !active.iter().any(|&a| a) {
        return Err(Error::contract("text encoder input is all padding"));
    }
    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let tok_emb = g.param(store, &format!("{prefix}.tok_emb"))?;
    let pos_emb = g.param(store, &format!("{prefix}.pos_emb"))?;
    let tok = g.gather_rows(tok_emb, &ids)?;
    let pos = g.gather_rows(pos_emb, &positions)?;
    let x = g.add(tok, pos)?;
    let l = tokens.len();
    let mask: Vec<bool> = (0..l * l).map(|i| active[i % l]).collect();
    let (states, _) = encoder_stack(g, store, &format!("{prefix}.stack"), &cfg.stack(), x, &mask)?;
    Ok((states, active))
}

/// Mean of the non-pad states followed by the output layer.
pub fn encode_pooled<T: Float>(
    g: &mut Graph<T>,
    store: &ParameterStore<T>,
    prefix: &str,
    cfg: &TextEncoderConfig,
    tokens: &[u32],
) -> Result<Var> {
    let (states, active) = encode_states(g, store, prefix, cfg, tokens)?;
    let pooled = g.masked_mean_pool(states, &active)?;
    linear(g, store, &format!("{prefix}.out"), pooled)
}

/// Pooled encoding evaluated without recording, as a plain vector.
pub fn encode_pooled_value<T: Float>(store: &ParameterStore<T>, prefix: &str, cfg: &TextEncoderConfig, tokens: &[u32]) -> Result<Tensor<T>> {
    let mut g = Graph::inference();
    let v = encode_pooled(&mut g, store, prefix, cfg, tokens)?;
    Ok(g.value(v).clone())
}
