use std::cmp::Ordering;

use log::debug;
use serde::{Deserialize, Serialize};

use super::model::GenerativeModel;
use crate::combiner::ModalityMask;
use crate::data::vocab::{END, START};
use crate::data::{join_tokens, FeatureStore, TurnContext};
use crate::diff::{Float, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamHypothesis {
    /// Output tokens, without START; ends with END when finished normally.
    pub tokens: Vec<u32>,
    pub logprob: f64,
    pub finished: bool,
}

impl BeamHypothesis {
    /// Tokens up to (not including) END.
    pub fn content(&self) -> &[u32] {
        match self.tokens.last() {
            Some(&END) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecodeOptions {
    pub beam_size: usize,
    pub trigram_block: bool,
    pub max_len: usize,
}

/// True when appending `next` repeats a trigram already in `tokens`.
pub fn repeats_trigram(tokens: &[u32], next: u32) -> bool {
    let n = tokens.len();
    if n < 2 {
        return false;
    }
    let tri = [tokens[n - 2], tokens[n - 1], next];
    tokens.windows(3).any(|w| w == tri)
}

/// True when some trigram occurs twice in `tokens`.
pub fn has_repeated_trigram(tokens: &[u32]) -> bool {
    let mut seen = std::collections::HashSet::new();
    tokens.windows(3).any(|w| !seen.insert(w))
}

/// Continuations from `h`: every allowed token except blocked ones, with
/// END always allowed.
fn expansions(vocab_allows: &dyn Fn(u32) -> bool, logp: &[f64], h: &[u32], block: bool) -> Vec<(u32, f64)> {
    logp.iter()
        .enumerate()
        .map(|(t, &lp)| (t as u32, lp))
        .filter(|&(t, lp)| lp.is_finite() && vocab_allows(t))
        .filter(|&(t, _)| !(block && t != END && repeats_trigram(h, t)))
        .collect()
}

fn cmp_hyp(a: &BeamHypothesis, b: &BeamHypothesis) -> Ordering {
    b.logprob.total_cmp(&a.logprob).then_with(|| a.tokens.cmp(&b.tokens))
}

impl<T: Float> GenerativeModel<T> {
    fn allowed(&self) -> impl Fn(u32) -> bool + '_ {
        move |t| !self.vocab.is_reserved_non_output(t)
    }

    fn step_log_probs(&self, memory: &Tensor<T>, tokens: &[u32]) -> Result<Vec<f64>> {
        let mut prefix = Vec::with_capacity(tokens.len() + 1);
        prefix.push(START);
        prefix.extend_from_slice(tokens);
        self.next_log_probs(memory, &prefix)
    }

    /// Greedy decoding; ties go to the lowest token id.
    pub fn decode_greedy_memory(&self, memory: &Tensor<T>, opts: &DecodeOptions) -> Result<BeamHypothesis> {
        let allowed = self.allowed();
        let mut h = BeamHypothesis { tokens: Vec::new(), logprob: 0.0, finished: false };
        while h.tokens.len() < opts.max_len {
            let logp = self.step_log_probs(memory, &h.tokens)?;
            let ex = expansions(&allowed, &logp, &h.tokens, opts.trigram_block);
            let best = ex.into_iter().fold(None::<(u32, f64)>, |best, (t, lp)| match best {
                Some((_, b)) if b >= lp => best,
                _ => Some((t, lp)),
            });
            let Some((t, lp)) = best else {
                debug!("every continuation blocked; ending hypothesis");
                h.finished = true;
                return Ok(h);
            };
            h.tokens.push(t);
            h.logprob += lp;
            if t == END {
                h.finished = true;
                return Ok(h);
            }
        }
        Ok(h)
    }

    /// Beam search without length normalization. Finished hypotheses leave
    /// the beam; search stops once no open hypothesis can beat the best
    /// finished one.
    pub fn decode_beam_memory(&self, memory: &Tensor<T>, opts: &DecodeOptions) -> Result<BeamHypothesis> {
        if opts.beam_size == 0 {
            return Err(Error::config("beam_size must be at least 1"));
        }
        let allowed = self.allowed();
        let mut open = vec![BeamHypothesis { tokens: Vec::new(), logprob: 0.0, finished: false }];
        let mut done: Vec<BeamHypothesis> = Vec::new();
        for _ in 0..opts.max_len {
            let mut pool = Vec::new();
            for h in &open {
                let logp = self.step_log_probs(memory, &h.tokens)?;
                let ex = expansions(&allowed, &logp, &h.tokens, opts.trigram_block);
                if ex.is_empty() {
                    debug!("every continuation blocked; ending hypothesis");
                    done.push(BeamHypothesis { finished: true, ..h.clone() });
                    continue;
                }
                for (t, lp) in ex {
                    let mut tokens = h.tokens.clone();
                    tokens.push(t);
                    pool.push(BeamHypothesis { tokens, logprob: h.logprob + lp, finished: t == END });
                }
            }
            pool.sort_by(cmp_hyp);
            pool.truncate(opts.beam_size);
            open.clear();
            for h in pool {
                if h.finished {
                    done.push(h);
                } else {
                    open.push(h);
                }
            }
            let best_done = done.iter().map(|h| h.logprob).fold(f64::NEG_INFINITY, f64::max);
            if open.iter().all(|h| h.logprob <= best_done) {
                open.clear();
            }
            if open.is_empty() {
                break;
            }
        }
        done.extend(open);
        done.sort_by(cmp_hyp);
        done.into_iter().next().ok_or_else(|| Error::contract("beam search produced no hypothesis"))
    }

    pub fn decode_options(&self) -> DecodeOptions {
        DecodeOptions {
            beam_size: self.config.beam_size,
            trigram_block: self.config.trigram_block,
            max_len: self.config.max_decode_len,
        }
    }

    pub fn decode(&self, ctx: &TurnContext, features: &FeatureStore, mask: ModalityMask, opts: &DecodeOptions) -> Result<BeamHypothesis> {
        let memory = self.memory_value(ctx, features, mask)?;
        self.decode_beam_memory(&memory, opts)
    }

    pub fn decode_greedy(&self, ctx: &TurnContext, features: &FeatureStore, mask: ModalityMask, opts: &DecodeOptions) -> Result<BeamHypothesis> {
        let memory = self.memory_value(ctx, features, mask)?;
        self.decode_greedy_memory(&memory, opts)
    }

    /// Total log-probability of a fixed output sequence.
    pub fn sequence_logprob(&self, memory: &Tensor<T>, tokens: &[u32]) -> Result<f64> {
        let mut total = 0.0;
        for i in 0..tokens.len() {
            total += self.step_log_probs(memory, &tokens[..i])?[tokens[i] as usize];
        }
        Ok(total)
    }

    pub fn hypothesis_text(&self, h: &BeamHypothesis) -> Result<String> {
        Ok(join_tokens(&self.vocab.decode(h.content())?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::all_turn_samples;
    use crate::generative::model::tests::toy_gen;

    #[test]
    fn blocks_repeated_trigram() {
        let (a, b, c) = (10, 11, 12);
        assert!(repeats_trigram(&[a, b, c, a, b], c));
        assert!(!repeats_trigram(&[a, b, c, a, b], a));
        assert!(!repeats_trigram(&[a], a));
        assert!(has_repeated_trigram(&[a, b, c, a, b, c]));
        assert!(!has_repeated_trigram(&[a, a, a, b]));
        assert!(has_repeated_trigram(&[a, a, a, a]));
    }

    #[test]
    fn beam_one_equals_greedy_and_never_repeats() {
        let (corpus, model) = toy_gen(6, 3, 8, 2);
        for s in all_turn_samples(&corpus.examples) {
            let memory = model.memory_value(&s.context, &corpus.features, ModalityMask::FULL).unwrap();
            let opts = DecodeOptions { beam_size: 1, trigram_block: true, max_len: 20 };
            let g = model.decode_greedy_memory(&memory, &opts).unwrap();
            let b = model.decode_beam_memory(&memory, &opts).unwrap();
            assert_eq!(g.tokens, b.tokens);
            assert!(!has_repeated_trigram(b.content()));
            let b2 = model.decode_beam_memory(&memory, &DecodeOptions { beam_size: 2, ..opts }).unwrap();
            assert!(!has_repeated_trigram(b2.content()));
            assert!(b2.tokens.iter().all(|&t| !model.vocab.is_reserved_non_output(t)));
            let lp = model.sequence_logprob(&memory, &b2.tokens).unwrap();
            assert!((lp - b2.logprob).abs() < 1e-9);
        }
    }

    #[test]
    fn logprob_never_positive() {
        let (corpus, model) = toy_gen(2, 1, 8, 3);
        let s = &all_turn_samples(&corpus.examples)[0];
        let h = model.decode(&s.context, &corpus.features, ModalityMask::FULL, &model.decode_options()).unwrap();
        assert!(h.logprob <= 0.0);
        assert!(h.tokens.len() <= model.config.max_decode_len);
    }
}
