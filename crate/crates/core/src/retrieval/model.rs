use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::combiner::{
    init_mm_att, mm_att_fuse, mm_sum_fuse, AttentionReadout, CombinerKind, FusedContext, ModalityMask, ModalityVectors,
};
use crate::data::vocab::SEP;
use crate::data::{tokenize, FeatureStore, StyleCatalog, TurnContext, Vocabulary, IMAGE_FEATURE_DIM};
use crate::diff::{Float, Graph, Initializer, ParameterStore, Tensor, Var};
use crate::encoders::{
    encode_pooled, encode_style, init_image_mlp, init_style_table, init_text_encoder, project_image_retrieval,
    TextEncoderConfig, TransformerConfig,
};
use crate::error::{Error, Result};

pub const DIALOGUE_ENCODER: &str = "dialogue_encoder";
pub const CANDIDATE_ENCODER: &str = "candidate_encoder";
pub const IMAGE_ENCODER: &str = "image";
pub const STYLE_ENCODER: &str = "style";
pub const MM_ATT: &str = "mm_att";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub text: TextEncoderConfig,
    pub image_hidden: usize,
    pub combiner: CombinerKind,
    /// Fusion stack for MM-Att; its width must equal `text.output_dim`.
    pub fusion: TransformerConfig,
    pub readout: AttentionReadout,
    pub n_styles: usize,
}

impl RetrievalConfig {
    pub fn full(vocab_size: usize, n_styles: usize) -> Self {
        RetrievalConfig {
            text: TextEncoderConfig::retrieval_default(vocab_size),
            image_hidden: 1024,
            combiner: CombinerKind::MmSum,
            fusion: TransformerConfig { n_layers: 2, hidden: 500, n_heads: 4, ffn_dim: 2000 },
            readout: AttentionReadout::Originals,
            n_styles,
        }
    }

    /// Small dimensions for tests and toy runs.
    pub fn tiny(vocab_size: usize, n_styles: usize, width: usize) -> Self {
        RetrievalConfig {
            text: TextEncoderConfig {
                n_layers: 1,
                hidden: width,
                n_heads: 2,
                ffn_dim: 2 * width,
                max_len: 64,
                vocab_size,
                output_dim: width,
                shared_response_encoder: false,
            },
            image_hidden: width,
            combiner: CombinerKind::MmSum,
            fusion: TransformerConfig { n_layers: 1, hidden: width, n_heads: 2, ffn_dim: 2 * width },
            readout: AttentionReadout::Originals,
            n_styles,
        }
    }

    pub fn width(&self) -> usize {
        self.text.output_dim
    }

    pub fn validate(&self) -> Result<()> {
        self.text.validate()?;
        if self.image_hidden == 0 || self.n_styles == 0 {
            return Err(Error::config("image_hidden and n_styles must be positive"));
        }
        if self.combiner == CombinerKind::MmAtt {
            self.fusion.validate("MM-Att fusion")?;
            if self.fusion.hidden != self.width() {
                return Err(Error::config(format!(
                    "MM-Att width {} differs from modality width {}",
                    self.fusion.hidden,
                    self.width()
                )));
            }
        }
        Ok(())
    }

    pub fn candidate_prefix(&self) -> &'static str {
        if self.text.shared_response_encoder {
            DIALOGUE_ENCODER
        } else {
            CANDIDATE_ENCODER
        }
    }
}

/// How excluded modalities are removed from a context.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    /// Excluded encoders are not run and the combiner never sees them.
    Omit,
    /// Excluded encoders are replaced by zero vectors of the right width.
    ZeroFill,
}

type CacheKey = (String, Vec<u32>);

/// Candidate encodings keyed by parameter fingerprint and token sequence.
#[derive(Clone, Default)]
pub struct CandidateCache<T> {
    inner: Arc<Mutex<HashMap<CacheKey, Tensor<T>>>>,
}

impl<T: Float> CandidateCache<T> {
    pub fn len(&self) -> usize {
        self.inner.lock().expect("candidate cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn clear(&self) {
        self.inner.lock().expect("candidate cache poisoned").clear();
    }
}

#[derive(Clone)]
pub struct RetrievalModel<T> {
    pub config: RetrievalConfig,
    pub params: ParameterStore<T>,
    pub vocab: Vocabulary,
    pub catalog: StyleCatalog,
    cache: CandidateCache<T>,
}

impl<T: Float> RetrievalModel<T> {
    pub fn new(config: RetrievalConfig, vocab: Vocabulary, catalog: StyleCatalog, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.text.vocab_size != vocab.len() {
            return Err(Error::config(format!(
                "text encoder vocab_size {} but vocabulary has {} entries",
                config.text.vocab_size,
                vocab.len()
            )));
        }
        if config.n_styles != catalog.len() {
            return Err(Error::config(format!("{} style rows for a catalog of {}", config.n_styles, catalog.len())));
        }
        let mut params = ParameterStore::new(seed);
        let mut init = Initializer::new(seed);
        let n = config.width();
        init_text_encoder(&mut params, &mut init, DIALOGUE_ENCODER, &config.text, true)?;
        if !config.text.shared_response_encoder {
            init_text_encoder(&mut params, &mut init, CANDIDATE_ENCODER, &config.text, true)?;
        }
        init_image_mlp(&mut params, &mut init, IMAGE_ENCODER, config.image_hidden, n)?;
        init_style_table(&mut params, &mut init, STYLE_ENCODER, config.n_styles, n)?;
        if config.combiner == CombinerKind::MmAtt {
            init_mm_att(&mut params, &mut init, MM_ATT, &config.fusion)?;
        }
        Ok(RetrievalModel { config, params, vocab, catalog, cache: CandidateCache::default() })
    }

    pub fn from_parts(config: RetrievalConfig, params: ParameterStore<T>, vocab: Vocabulary, catalog: StyleCatalog) -> Result<Self> {
        config.validate()?;
        let reference = RetrievalModel::<T>::new(config.clone(), vocab.clone(), catalog.clone(), params.seed())?;
        for (name, t) in reference.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(Error::config(format!("parameter {name} has shape {:?}, expected {:?}", p.shape(), t.shape())))
                }
                None => return Err(Error::config(format!("parameter {name} is missing"))),
            }
        }
        Ok(RetrievalModel { config, params, vocab, catalog, cache: CandidateCache::default() })
    }

    pub fn cache(&self) -> &CandidateCache<T> {
        &self.cache
    }

    /// History utterances joined by the separator token, keeping the most
    /// recent `max_len` tokens.
    pub fn history_tokens(&self, history: &[String]) -> Vec<u32> {
        let mut ids = Vec::new();
        for (i, u) in history.iter().enumerate() {
            if i > 0 {
                ids.push(SEP);
            }
            ids.extend(self.vocab.encode(&tokenize(u)));
        }
        let max = self.config.text.max_len;
        if ids.len() > max {
            ids.drain(..ids.len() - max);
        }
        ids
    }

    /// Response tokens, keeping the first `max_len`.
    pub fn candidate_tokens(&self, text: &str) -> Result<Vec<u32>> {
        let mut ids = self.vocab.encode(&tokenize(text));
        if ids.is_empty() {
            return Err(Error::contract("empty candidate response"));
        }
        ids.truncate(self.config.text.max_len);
        Ok(ids)
    }

    pub fn encode_candidate(&self, g: &mut Graph<T>, text: &str) -> Result<Var> {
        let ids = self.candidate_tokens(text)?;
        encode_pooled(g, &self.params, self.config.candidate_prefix(), &self.config.text, &ids)
    }

    /// r_T for one context. A context with no usable modality under `mask`
    /// gets the zero vector.
    pub fn encode_context(
        &self,
        g: &mut Graph<T>,
        ctx: &TurnContext,
        features: &FeatureStore,
        mask: ModalityMask,
        mode: MaskMode,
    ) -> Result<Var> {
        let n = self.config.width();
        if ctx.turn_index > 1 && ctx.history.is_empty() {
            return Err(Error::contract(format!("turn {} context has no history", ctx.turn_index)));
        }
        let run = match mode {
            MaskMode::Omit => mask,
            MaskMode::ZeroFill => ModalityMask::FULL,
        };
        let zero = |g: &mut Graph<T>| g.constant(Tensor::zeros(vec![n]));
        let mut vecs = ModalityVectors::default();
        if run.image {
            vecs.image = Some(if mask.image {
                let feat = features.require(&ctx.image_id)?;
                project_image_retrieval(g, &self.params, IMAGE_ENCODER, feat)?
            } else {
                zero(g)?
            });
        }
        if run.style {
            let idx = self.catalog.index_of(&ctx.responder_style)?;
            vecs.style = Some(if mask.style { encode_style(g, &self.params, STYLE_ENCODER, idx)? } else { zero(g)? });
        }
        if run.dialogue && !ctx.history.is_empty() {
            vecs.dialogue = Some(if mask.dialogue {
                let ids = self.history_tokens(&ctx.history);
                if ids.is_empty() {
                    return Err(Error::contract("dialogue history has no tokens"));
                }
                encode_pooled(g, &self.params, DIALOGUE_ENCODER, &self.config.text, &ids)?
            } else {
                zero(g)?
            });
        }
        let present = vecs.present();
        if present.is_empty() {
            return zero(g);
        }
        Ok(self.fuse(g, &vecs, present)?.r_t)
    }

    fn fuse(&self, g: &mut Graph<T>, vecs: &ModalityVectors, mask: ModalityMask) -> Result<FusedContext> {
        match self.config.combiner {
            CombinerKind::MmSum => mm_sum_fuse(g, vecs, mask),
            CombinerKind::MmAtt => {
                mm_att_fuse(g, &self.params, MM_ATT, &self.config.fusion, self.config.readout, vecs, mask)
            }
        }
    }

    /// r_T evaluated without recording.
    pub fn context_value(&self, ctx: &TurnContext, features: &FeatureStore, mask: ModalityMask, mode: MaskMode) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let v = self.encode_context(&mut g, ctx, features, mask, mode)?;
        Ok(g.value(v).clone())
    }

    /// r_C, memoized on (parameter fingerprint, tokens).
    pub fn candidate_value(&self, fingerprint: &str, text: &str) -> Result<Tensor<T>> {
        let ids = self.candidate_tokens(text)?;
        let key = (fingerprint.to_string(), ids);
        if let Some(t) = self.cache.inner.lock().expect("candidate cache poisoned").get(&key) {
            return Ok(t.clone());
        }
        let mut g = Graph::inference();
        let v = encode_pooled(&mut g, &self.params, self.config.candidate_prefix(), &self.config.text, &key.1)?;
        let t = g.value(v).clone();
        self.cache.inner.lock().expect("candidate cache poisoned").insert(key, t.clone());
        Ok(t)
    }

    pub fn fingerprint(&self) -> String {
        self.params.fingerprint()
    }

    /// Loads pretrained dialogue-encoder weights: the pretrained candidate
    /// encoder initializes both text encoders.
    pub fn load_pretrained_text(&mut self, pretrained: &ParameterStore<T>) -> Result<usize> {
        let mut n = self.params.copy_prefix(pretrained, CANDIDATE_ENCODER, DIALOGUE_ENCODER)?;
        if !self.config.text.shared_response_encoder {
            n += self.params.copy_prefix(pretrained, CANDIDATE_ENCODER, CANDIDATE_ENCODER)?;
        }
        self.cache.clear();
        Ok(n)
    }

    pub fn image_feature_dim(&self) -> usize {
        IMAGE_FEATURE_DIM
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::data::synthetic::{toy_corpus, ToyCorpus, ToyCorpusConfig};
    use crate::data::{all_turn_samples, build_vocab};

    pub(crate) fn toy(n: usize, width: usize, seed: u64) -> (ToyCorpus, RetrievalModel<f64>) {
        let corpus = toy_corpus(&ToyCorpusConfig { n_examples: n, seed, ..Default::default() });
        let vocab = build_vocab(&corpus.examples, 1, &corpus.catalog);
        let cfg = RetrievalConfig::tiny(vocab.len(), corpus.catalog.len(), width);
        let model = RetrievalModel::new(cfg, vocab, corpus.catalog.clone(), seed).unwrap();
        (corpus, model)
    }

    #[test]
    fn zero_fill_matches_omit_for_sum() {
        let (corpus, model) = toy(4, 8, 3);
        for s in all_turn_samples(&corpus.examples) {
            for (_, mask) in ModalityMask::ablation_rows() {
                let a = model.context_value(&s.context, &corpus.features, mask, MaskMode::Omit).unwrap();
                let b = model.context_value(&s.context, &corpus.features, mask, MaskMode::ZeroFill).unwrap();
                let bits = |t: &Tensor<f64>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(&a), bits(&b));
            }
        }
    }

    #[test]
    fn no_signal_context_is_zero() {
        let (corpus, model) = toy(2, 8, 1);
        let s = &all_turn_samples(&corpus.examples)[0];
        assert_eq!(s.context.turn_index, 1);
        let r = model.context_value(&s.context, &corpus.features, ModalityMask::new(false, false, true), MaskMode::Omit).unwrap();
        assert!(r.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn shared_encoder_gives_identical_vectors() {
        let (corpus, model) = toy(2, 8, 5);
        let mut cfg = model.config.clone();
        cfg.text.shared_response_encoder = true;
        let m = RetrievalModel::<f64>::new(cfg, model.vocab.clone(), corpus.catalog.clone(), 5).unwrap();
        let text = &corpus.examples[0].turns[0].text;
        let fp = m.fingerprint();
        let c = m.candidate_value(&fp, text).unwrap();
        let mut g = Graph::inference();
        let ids = m.history_tokens(std::slice::from_ref(text));
        let d = encode_pooled(&mut g, &m.params, DIALOGUE_ENCODER, &m.config.text, &ids).unwrap();
        assert_eq!(g.value(d).data(), c.data());
        assert_eq!(m.cache().len(), 1);
    }

    #[test]
    fn history_truncates_oldest() {
        let (corpus, mut model) = toy(2, 8, 5);
        model.config.text.max_len = 4;
        let turns = &corpus.examples[0].turns;
        let history = vec![turns[0].text.clone(), turns[1].text.clone()];
        let ids = model.history_tokens(&history);
        assert_eq!(ids.len(), 4);
        let last = model.vocab.encode(&tokenize(&turns[1].text));
        assert!(last.len() >= 3);
        assert_eq!(ids[..], last[last.len() - 4..]);
    }

    #[test]
    fn turn_two_without_history_is_rejected() {
        let (corpus, model) = toy(2, 8, 5);
        let mut ctx = TurnContext::new("img0000", "Sweet", vec![]);
        ctx.turn_index = 2;
        let mut g = Graph::inference();
        assert!(model.encode_context(&mut g, &ctx, &corpus.features, ModalityMask::FULL, MaskMode::Omit).is_err());
    }

    #[test]
    fn mismatched_att_width_is_config_error() {
        let mut cfg = RetrievalConfig::tiny(20, 10, 8);
        cfg.combiner = CombinerKind::MmAtt;
        cfg.fusion.hidden = 6;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
