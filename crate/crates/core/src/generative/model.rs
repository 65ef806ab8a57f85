use serde::{Deserialize, Serialize};

use crate::combiner::ModalityMask;
use crate::data::vocab::{END, SEP, START};
use crate::data::{tokenize, FeatureStore, StyleCatalog, TurnContext, Vocabulary};
use crate::diff::{Float, Graph, Initializer, ParameterStore, Tensor, Var};
use crate::encoders::transformer::{decoder_stack, init_decoder_stack, init_linear, linear};
use crate::encoders::{encode_states, init_image_linear, init_text_encoder, project_image_generative, TextEncoderConfig, TransformerConfig};
use crate::error::{Error, Result};

pub const ENCODER: &str = "encoder";
pub const IMAGE: &str = "image";
pub const DECODER: &str = "decoder";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub encoder: TextEncoderConfig,
    pub decoder: TransformerConfig,
    pub beam_size: usize,
    pub trigram_block: bool,
    pub max_decode_len: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl GenConfig {
    pub fn full(vocab_size: usize) -> Self {
        let mut encoder = TextEncoderConfig::retrieval_default(vocab_size);
        encoder.output_dim = encoder.hidden;
        GenConfig {
            decoder: encoder.stack(),
            encoder,
            beam_size: 2,
            trigram_block: true,
            max_decode_len: 32,
            batch_size: 32,
            lr: 1e-4,
        }
    }

    pub fn tiny(vocab_size: usize, width: usize) -> Self {
        let encoder = TextEncoderConfig {
            n_layers: 1,
            hidden: width,
            n_heads: 2,
            ffn_dim: 2 * width,
            max_len: 64,
            vocab_size,
            output_dim: width,
            shared_response_encoder: false,
        };
        GenConfig { decoder: encoder.stack(), encoder, beam_size: 2, trigram_block: true, max_decode_len: 32, batch_size: 32, lr: 1e-3 }
    }

    pub fn width(&self) -> usize {
        self.encoder.hidden
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate("decoder")?;
        if self.decoder.hidden != self.encoder.hidden {
            return Err(Error::config("decoder and encoder token widths differ"));
        }
        if self.beam_size == 0 {
            return Err(Error::config("beam_size must be at least 1"));
        }
        if self.max_decode_len == 0 || self.batch_size == 0 {
            return Err(Error::config("max_decode_len and batch_size must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone)]
pub struct GenerativeModel<T> {
    pub config: GenConfig,
    pub params: ParameterStore<T>,
    pub vocab: Vocabulary,
    pub catalog: StyleCatalog,
}

/// Encoder states for one context: the text states followed by the image
/// state when present.
pub struct EncodedInput {
    pub memory: Var,
    pub tokens: Vec<u32>,
    pub image_position: Option<usize>,
}

impl<T: Float> GenerativeModel<T> {
    pub fn new(config: GenConfig, vocab: Vocabulary, catalog: StyleCatalog, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.encoder.vocab_size != vocab.len() {
            return Err(Error::config(format!(
                "encoder vocab_size {} but vocabulary has {} entries",
                config.encoder.vocab_size,
                vocab.len()
            )));
        }
        if vocab.n_styles() != catalog.len() {
            return Err(Error::config("vocabulary style tokens do not match the catalog"));
        }
        let mut params = ParameterStore::new(seed);
        let mut init = Initializer::new(seed);
        let h = config.width();
        init_text_encoder(&mut params, &mut init, ENCODER, &config.encoder, false)?;
        init_image_linear(&mut params, &mut init, IMAGE, h)?;
        params.insert(format!("{DECODER}.tok_emb"), init.embedding(vocab.len(), h))?;
        params.insert(format!("{DECODER}.pos_emb"), init.embedding(config.max_decode_len + 1, h))?;
        init_decoder_stack(&mut params, &mut init, &format!("{DECODER}.stack"), &config.decoder)?;
        init_linear(&mut params, &mut init, &format!("{DECODER}.out"), h, vocab.len())?;
        Ok(GenerativeModel { config, params, vocab, catalog })
    }

    pub fn from_parts(config: GenConfig, params: ParameterStore<T>, vocab: Vocabulary, catalog: StyleCatalog) -> Result<Self> {
        let reference = GenerativeModel::<T>::new(config.clone(), vocab.clone(), catalog.clone(), params.seed())?;
        for (name, t) in reference.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                _ => return Err(Error::config(format!("parameter {name} is missing or has the wrong shape"))),
            }
        }
        Ok(GenerativeModel { config, params, vocab, catalog })
    }

    /// Style token, separator, then the history joined by separators.
    /// Oldest history tokens are dropped to fit `max_len`.
    pub fn encoder_tokens(&self, ctx: &TurnContext, mask: ModalityMask) -> Result<Vec<u32>> {
        let mut prefix = Vec::new();
        if mask.style {
            prefix.push(self.vocab.style_id(self.catalog.index_of(&ctx.responder_style)?)?);
        }
        let mut history = Vec::new();
        if mask.dialogue {
            for (i, u) in ctx.history.iter().enumerate() {
                if i > 0 {
                    history.push(SEP);
                }
                history.extend(self.vocab.encode(&tokenize(u)));
            }
        }
        if !prefix.is_empty() && !history.is_empty() {
            prefix.push(SEP);
        }
        let room = self.config.encoder.max_len.saturating_sub(prefix.len());
        if history.len() > room {
            history.drain(..history.len() - room);
        }
        prefix.extend(history);
        Ok(prefix)
    }

    /// Encoder output `[L + 1, h]` (or `[L, h]` without the image). A
    /// context with no usable input is a single zero state.
    pub fn encode_input(&self, g: &mut Graph<T>, ctx: &TurnContext, features: &FeatureStore, mask: ModalityMask) -> Result<EncodedInput> {
        let tokens = self.encoder_tokens(ctx, mask)?;
        let mut parts = Vec::with_capacity(2);
        if !tokens.is_empty() {
            let (states, _) = encode_states(g, &self.params, ENCODER, &self.config.encoder, &tokens)?;
            parts.push(states);
        }
        let mut image_position = None;
        if mask.image {
            let feat = features.require(&ctx.image_id)?;
            parts.push(project_image_generative(g, &self.params, IMAGE, feat)?);
            image_position = Some(tokens.len());
        }
        let memory = if parts.is_empty() {
            g.constant(Tensor::zeros(vec![1, self.config.width()]))?
        } else {
            g.concat_rows(&parts)?
        };
        Ok(EncodedInput { memory, tokens, image_position })
    }

    /// Decoder logits `[len(prefix), V]`; `prefix` starts with START.
    pub fn decoder_logits(&self, g: &mut Graph<T>, memory: Var, prefix: &[u32]) -> Result<Var> {
        if prefix.is_empty() || prefix.len() > self.config.max_decode_len + 1 {
            return Err(Error::contract(format!("decoder prefix of length {}", prefix.len())));
        }
        for &t in prefix {
            self.vocab.check(t)?;
        }
        let ids: Vec<usize> = prefix.iter().map(|&t| t as usize).collect();
        let pos: Vec<usize> = (0..prefix.len()).collect();
        let tok_emb = g.param(&self.params, &format!("{DECODER}.tok_emb"))?;
        let pos_emb = g.param(&self.params, &format!("{DECODER}.pos_emb"))?;
        let tok = g.gather_rows(tok_emb, &ids)?;
        let p = g.gather_rows(pos_emb, &pos)?;
        let y = g.add(tok, p)?;
        let y = decoder_stack(g, &self.params, &format!("{DECODER}.stack"), &self.config.decoder, y, memory)?;
        linear(g, &self.params, &format!("{DECODER}.out"), y)
    }

    /// Decoder input and targets for a gold response: [START] + gold and
    /// gold + [END], with gold truncated to `max_decode_len`.
    pub fn teacher_forcing(&self, gold: &str) -> Option<(Vec<u32>, Vec<u32>)> {
        let mut ids = self.vocab.encode(&tokenize(gold));
        if ids.is_empty() {
            return None;
        }
        ids.truncate(self.config.max_decode_len);
        let mut input = vec![START];
        input.extend(&ids);
        ids.push(END);
        Some((input, ids))
    }

    /// Logits and targets for one sample, or `None` for an empty target.
    pub fn sample_logits(
        &self,
        g: &mut Graph<T>,
        ctx: &TurnContext,
        gold: &str,
        features: &FeatureStore,
        mask: ModalityMask,
    ) -> Result<Option<(Var, Vec<u32>)>> {
        let Some((input, targets)) = self.teacher_forcing(gold) else { return Ok(None) };
        let enc = self.encode_input(g, ctx, features, mask)?;
        Ok(Some((self.decoder_logits(g, enc.memory, &input)?, targets)))
    }

    /// Next-token log-probabilities after `prefix`, with `memory` given as
    /// plain values.
    pub fn next_log_probs(&self, memory: &Tensor<T>, prefix: &[u32]) -> Result<Vec<f64>> {
        let mut g = Graph::inference();
        let m = g.constant(memory.clone())?;
        let logits = self.decoder_logits(&mut g, m, prefix)?;
        let last = g.value(logits).row(prefix.len() - 1);
        let xs: Vec<f64> = last.iter().map(|x| x.to_f64_lossy()).collect();
        let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        Ok(xs.into_iter().map(|x| x - lse).collect())
    }

    pub fn memory_value(&self, ctx: &TurnContext, features: &FeatureStore, mask: ModalityMask) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let enc = self.encode_input(&mut g, ctx, features, mask)?;
        Ok(g.value(enc.memory).clone())
    }
}
