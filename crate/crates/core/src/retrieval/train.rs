use std::collections::HashSet;

use log::{info, warn};
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::eval::{evaluate_recall, RecallOptions};
use super::model::{MaskMode, RetrievalModel, CANDIDATE_ENCODER, DIALOGUE_ENCODER};
use crate::combiner::{CombinerKind, ModalityMask};
use crate::data::{tokenize, FeatureStore, TurnSample, Vocabulary};
use crate::diff::{AdamConfig, AdamState, Float, Graph, Gradients, ParameterStore, Var};
use crate::encoders::encode_pooled;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalTrainConfig {
    pub batch_size: usize,
    pub combiner_kind: CombinerKind,
    pub shared_text_encoders: bool,
    pub modality_mask: ModalityMask,
    pub lr: f64,
    pub seed: u64,
    pub max_steps: usize,
    /// Validation R@1 is checked every `eval_every` steps; 0 disables it.
    pub eval_every: usize,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    pub n_candidates: usize,
}

impl Default for RetrievalTrainConfig {
    fn default() -> Self {
        RetrievalTrainConfig {
            batch_size: 500,
            combiner_kind: CombinerKind::MmSum,
            shared_text_encoders: false,
            modality_mask: ModalityMask::FULL,
            lr: 1e-4,
            seed: 0,
            max_steps: 10_000,
            eval_every: 0,
            patience: 3,
            n_candidates: 100,
        }
    }
}

impl RetrievalTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::config("batch_size must be at least 2 for in-batch negatives"));
        }
        if self.modality_mask.is_empty() {
            return Err(Error::config("modality mask is empty"));
        }
        AdamConfig::with_lr(self.lr).validate()
    }
}

/// In-batch negatives loss: context i against every gold j in the batch,
/// cross-entropy towards the diagonal.
pub fn batch_loss<T: Float>(
    g: &mut Graph<T>,
    model: &RetrievalModel<T>,
    batch: &[&TurnSample],
    features: &FeatureStore,
    mask: ModalityMask,
) -> Result<Var> {
    if batch.len() < 2 {
        return Err(Error::contract("in-batch negatives need a batch of at least 2"));
    }
    let mut contexts = Vec::with_capacity(batch.len());
    let mut candidates = Vec::with_capacity(batch.len());
    for s in batch {
        contexts.push(model.encode_context(g, &s.context, features, mask, MaskMode::Omit)?);
        candidates.push(model.encode_candidate(g, &s.gold)?);
    }
    let r = g.concat_rows(&contexts)?;
    let c = g.concat_rows(&candidates)?;
    let scores = g.matmul_nt(r, c)?;
    let targets: Vec<Option<usize>> = (0..batch.len()).map(Some).collect();
    g.cross_entropy(scores, &targets, None)
}

fn duplicate_golds(batch: &[&TurnSample]) -> usize {
    let mut seen = HashSet::new();
    batch.iter().filter(|s| !seen.insert(s.gold.as_str())).count()
}

/// One optimizer step on a batch; returns the loss before the update.
pub fn train_step<T: Float>(
    model: &mut RetrievalModel<T>,
    opt: &mut AdamState<T>,
    batch: &[&TurnSample],
    features: &FeatureStore,
    mask: ModalityMask,
) -> Result<f64> {
    let dups = duplicate_golds(batch);
    if dups > 0 {
        warn!("batch has {dups} duplicate gold responses; their columns act as extra correct answers scored as negatives");
    }
    let mut g = Graph::new();
    let loss = batch_loss(&mut g, model, batch, features, mask)?;
    let value = g.value(loss).item().to_f64_lossy();
    let grads = g.backward(loss)?;
    apply(model, opt, &grads)?;
    Ok(value)
}

fn apply<T: Float>(model: &mut RetrievalModel<T>, opt: &mut AdamState<T>, grads: &Gradients<T>) -> Result<()> {
    let g = grads.for_store(&model.params);
    opt.step(&mut model.params, &g)?;
    model.cache().clear();
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub losses: Vec<f64>,
    pub valid_r1: Vec<(usize, f64)>,
    pub best_valid_r1: Option<f64>,
    pub stopped_early: bool,
}

/// Shuffled mini-batches, reshuffled every epoch. A final short batch is
/// merged into the previous one when it would have fewer than 2 samples.
pub(crate) fn epoch_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < 2) {
        let tail = batches.pop().unwrap_or_default();
        if let Some(prev) = batches.last_mut() {
            prev.extend(tail);
        }
    }
    batches
}

/// Trains until `max_steps`, or until validation R@1 stops improving when
/// validation samples are given. The best validated parameters are kept.
pub fn train_retrieval<T: Float>(
    model: &mut RetrievalModel<T>,
    train: &[TurnSample],
    valid: Option<&[TurnSample]>,
    features: &FeatureStore,
    cfg: &RetrievalTrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.len() < 2 {
        return Err(Error::contract("training needs at least 2 samples"));
    }
    let mut opt = AdamState::new(AdamConfig::with_lr(cfg.lr))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = TrainReport::default();
    let mut best: Option<(f64, ParameterStore<T>)> = None;
    let mut stale = 0;
    'outer: while report.steps < cfg.max_steps {
        for idx in epoch_batches(train.len(), cfg.batch_size, &mut rng) {
            let batch: Vec<&TurnSample> = idx.iter().map(|&i| &train[i]).collect();
            let loss = train_step(model, &mut opt, &batch, features, cfg.modality_mask)?;
            report.losses.push(loss);
            report.steps += 1;
            if let (Some(valid), true) = (valid, cfg.eval_every > 0 && report.steps % cfg.eval_every == 0) {
                let opts = RecallOptions { n_candidates: cfg.n_candidates, ks: vec![1], seed: cfg.seed, mask: cfg.modality_mask };
                let r1 = evaluate_recall(&super::eval::ModelScorer::new(model, features), valid, &opts)?.all["r1"];
                info!("step {} loss {loss:.4} valid R@1 {r1:.4}", report.steps);
                report.valid_r1.push((report.steps, r1));
                if best.as_ref().is_none_or(|(b, _)| r1 > *b) {
                    best = Some((r1, model.params.clone()));
                    stale = 0;
                } else {
                    stale += 1;
                    if stale >= cfg.patience {
                        report.stopped_early = true;
                        break 'outer;
                    }
                }
            }
            if report.steps >= cfg.max_steps {
                break;
            }
        }
    }
    if let Some((r1, params)) = best {
        report.best_valid_r1 = Some(r1);
        model.params = params;
        model.cache().clear();
    }
    Ok(report)
}

/// An utterance followed by its reply, for dialogue-encoder pretraining.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UtterancePair {
    pub context: String,
    pub response: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub k_negatives: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub max_steps: usize,
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::config("pretraining batch_size must be at least 2"));
        }
        if self.k_negatives == 0 || self.k_negatives > self.batch_size - 1 {
            return Err(Error::config(format!(
                "k_negatives must be in 1..={} for batch size {}",
                self.batch_size - 1,
                self.batch_size
            )));
        }
        AdamConfig::with_lr(self.lr).validate()
    }
}

/// Column mask giving each row its positive plus `k` sampled in-batch
/// negatives. `None` when every column is kept.
pub fn negative_mask(b: usize, k: usize, rng: &mut ChaCha8Rng) -> Result<Option<Vec<bool>>> {
    if k == 0 || k >= b {
        return Err(Error::config(format!("k_negatives {k} outside 1..={}", b.saturating_sub(1))));
    }
    if k == b - 1 {
        return Ok(None);
    }
    let mut mask = vec![false; b * b];
    for i in 0..b {
        mask[i * b + i] = true;
        for j in index::sample(rng, b - 1, k) {
            let col = if j >= i { j + 1 } else { j };
            mask[i * b + col] = true;
        }
    }
    Ok(Some(mask))
}

/// Text-only matching loss: contexts through the dialogue encoder,
/// responses through the candidate encoder.
pub fn pretrain_loss<T: Float>(
    g: &mut Graph<T>,
    model: &RetrievalModel<T>,
    batch: &[&UtterancePair],
    mask: Option<&[bool]>,
) -> Result<Var> {
    if batch.len() < 2 {
        return Err(Error::contract("pretraining needs a batch of at least 2"));
    }
    let text = &model.config.text;
    let mut ctx = Vec::with_capacity(batch.len());
    let mut cand = Vec::with_capacity(batch.len());
    for p in batch {
        let ids = model.history_tokens(std::slice::from_ref(&p.context));
        if ids.is_empty() {
            return Err(Error::contract("empty pretraining context"));
        }
        ctx.push(encode_pooled(g, &model.params, DIALOGUE_ENCODER, text, &ids)?);
        cand.push(model.encode_candidate(g, &p.response)?);
    }
    let r = g.concat_rows(&ctx)?;
    let c = g.concat_rows(&cand)?;
    let scores = g.matmul_nt(r, c)?;
    let targets: Vec<Option<usize>> = (0..batch.len()).map(Some).collect();
    g.cross_entropy(scores, &targets, mask)
}

pub fn pretrain_step<T: Float>(
    model: &mut RetrievalModel<T>,
    opt: &mut AdamState<T>,
    batch: &[&UtterancePair],
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mask = negative_mask(batch.len(), k, rng)?;
    let mut g = Graph::new();
    let loss = pretrain_loss(&mut g, model, batch, mask.as_deref())?;
    let value = g.value(loss).item().to_f64_lossy();
    let grads = g.backward(loss)?;
    apply(model, opt, &grads)?;
    Ok(value)
}

pub fn pretrain<T: Float>(model: &mut RetrievalModel<T>, pairs: &[UtterancePair], cfg: &PretrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if pairs.len() < cfg.batch_size.min(2) || pairs.len() < 2 {
        return Err(Error::contract("pretraining needs at least 2 pairs"));
    }
    let mut opt = AdamState::new(AdamConfig::with_lr(cfg.lr))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = TrainReport::default();
    while report.steps < cfg.max_steps {
        for idx in epoch_batches(pairs.len(), cfg.batch_size, &mut rng) {
            let batch: Vec<&UtterancePair> = idx.iter().map(|&i| &pairs[i]).collect();
            let k = cfg.k_negatives.min(batch.len() - 1);
            report.losses.push(pretrain_step(model, &mut opt, &batch, k, &mut rng)?);
            report.steps += 1;
            if report.steps >= cfg.max_steps {
                break;
            }
        }
    }
    Ok(report)
}

/// Consecutive utterance pairs from dialogue turns.
pub fn pairs_from_samples(samples: &[TurnSample]) -> Vec<UtterancePair> {
    samples
        .iter()
        .filter_map(|s| s.context.history.last().map(|c| UtterancePair { context: c.clone(), response: s.gold.clone() }))
        .collect()
}

/// Words of every pair, for vocabulary building.
pub fn pair_tokens(pairs: &[UtterancePair]) -> Vec<Vec<String>> {
    pairs.iter().flat_map(|p| [tokenize(&p.context), tokenize(&p.response)]).collect()
}

/// Names of the parameters a pretrained checkpoint contributes.
pub fn pretrained_text_params<T: Float>(store: &ParameterStore<T>) -> Vec<String> {
    let prefix = format!("{CANDIDATE_ENCODER}.");
    store.names().filter(|n| n.starts_with(&prefix)).map(String::from).collect()
}

pub fn check_vocab_compatible(a: &Vocabulary, b: &Vocabulary) -> Result<()> {
    if a != b {
        return Err(Error::config("pretrained checkpoint was built with a different vocabulary"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::combiner::ModalityMask;
    use crate::data::all_turn_samples;
    use crate::diff::Tensor;
    use crate::retrieval::model::tests::toy;

    #[test]
    fn zeroed_outputs_give_ln_b() {
        let (corpus, mut model) = toy(4, 8, 2);
        for name in ["dialogue_encoder.out.w", "dialogue_encoder.out.b", "image.out.w", "image.out.b", "style.table"] {
            model.params.zero(name).unwrap();
        }
        let samples = all_turn_samples(&corpus.examples);
        let batch: Vec<&TurnSample> = samples.iter().take(4).collect();
        let mut g = Graph::new();
        let loss = batch_loss(&mut g, &model, &batch, &corpus.features, ModalityMask::FULL).unwrap();
        assert!((g.value(loss).item() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn diagonal_scores_give_small_loss() {
        let mut g = Graph::<f64>::new();
        let s = g.constant(Tensor::matrix(2, 2, vec![10.0, 0.0, 0.0, 10.0]).unwrap()).unwrap();
        let l = g.cross_entropy(s, &[Some(0), Some(1)], None).unwrap();
        let oracle = -((10f64).exp() / ((10f64).exp() + 1.0)).ln();
        assert!((g.value(l).item() - oracle).abs() < 1e-15);
        assert!((oracle - 4.54e-5).abs() < 1e-7);
    }

    #[test]
    fn full_negatives_match_unmasked_loss() {
        let (corpus, model) = toy(5, 8, 4);
        let samples = all_turn_samples(&corpus.examples);
        let pairs = pairs_from_samples(&samples);
        let batch: Vec<&UtterancePair> = pairs.iter().take(5).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(negative_mask(5, 4, &mut rng).unwrap().is_none());
        let full = vec![true; 25];
        let mut g1 = Graph::new();
        let a = pretrain_loss(&mut g1, &model, &batch, None).unwrap();
        let mut g2 = Graph::new();
        let b = pretrain_loss(&mut g2, &model, &batch, Some(&full)).unwrap();
        assert_eq!(g1.value(a).item().to_bits(), g2.value(b).item().to_bits());
    }

    #[test]
    fn uniform_scores_with_k_negatives_give_ln_k_plus_one() {
        let (corpus, mut model) = toy(8, 8, 4);
        model.params.zero("dialogue_encoder.out.w").unwrap();
        model.params.zero("dialogue_encoder.out.b").unwrap();
        let pairs = pairs_from_samples(&all_turn_samples(&corpus.examples));
        let batch: Vec<&UtterancePair> = pairs.iter().take(8).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mask = negative_mask(8, 4, &mut rng).unwrap().unwrap();
        for i in 0..8 {
            assert_eq!(mask[i * 8..(i + 1) * 8].iter().filter(|&&m| m).count(), 5);
            assert!(mask[i * 8 + i]);
        }
        let mut g = Graph::new();
        let l = pretrain_loss(&mut g, &model, &batch, Some(&mask)).unwrap();
        assert!((g.value(l).item() - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn k_out_of_range_is_config_error() {
        let cfg = PretrainConfig { k_negatives: 8, batch_size: 8, lr: 1e-3, seed: 0, max_steps: 1 };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = PretrainConfig { k_negatives: 0, ..cfg };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn batch_of_one_is_rejected() {
        let cfg = RetrievalTrainConfig { batch_size: 1, ..Default::default() };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn training_reduces_loss() {
        let (corpus, mut model) = toy(6, 8, 7);
        let samples = all_turn_samples(&corpus.examples);
        let cfg = RetrievalTrainConfig { batch_size: 18, lr: 3e-3, max_steps: 30, ..Default::default() };
        let report = train_retrieval(&mut model, &samples, None, &corpus.features, &cfg).unwrap();
        assert_eq!(report.steps, 30);
        assert!(report.losses.last().unwrap() < &report.losses[0]);
    }

    #[test]
    fn pretrained_candidate_encoder_initializes_both_encoders() {
        let (corpus, mut model) = toy(4, 8, 1);
        let (_, other) = toy(4, 8, 2);
        let n = model.load_pretrained_text(&other.params).unwrap();
        assert_eq!(n, 2 * pretrained_text_params(&other.params).len());
        for name in pretrained_text_params(&other.params) {
            let d = name.replacen(CANDIDATE_ENCODER, DIALOGUE_ENCODER, 1);
            assert_eq!(model.params.get(&d).unwrap().data(), other.params.get(&name).unwrap().data());
            assert_eq!(model.params.get(&name).unwrap().data(), other.params.get(&name).unwrap().data());
        }
        let _ = corpus;
    }
}
