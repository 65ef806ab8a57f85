use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::decode::DecodeOptions;
use super::model::GenerativeModel;
use crate::combiner::ModalityMask;
use crate::data::{tokenize, FeatureStore, TurnSample};
use crate::diff::{AdamConfig, AdamState, Float, Graph, Var};
use crate::error::{Error, Result};
use crate::metrics::{rouge_l, token_f1, MetricAccumulator, MetricReport};
use crate::retrieval::train::epoch_batches;
use crate::retrieval::{AblationSource, AblationTable, TrainReport};

/// Teacher-forced cross-entropy, averaged over every target token in the
/// batch. Samples with an empty gold are skipped; `None` if all are.
pub fn gen_batch_loss<T: Float>(
    g: &mut Graph<T>,
    model: &GenerativeModel<T>,
    batch: &[&TurnSample],
    features: &FeatureStore,
    mask: ModalityMask,
) -> Result<Option<Var>> {
    let mut logits = Vec::with_capacity(batch.len());
    let mut targets = Vec::new();
    for s in batch {
        match model.sample_logits(g, &s.context, &s.gold, features, mask)? {
            Some((l, t)) => {
                logits.push(l);
                targets.extend(t.into_iter().map(|x| Some(x as usize)));
            }
            None => warn!("skipping {}: empty target", s.id),
        }
    }
    if logits.is_empty() {
        return Ok(None);
    }
    let all = g.concat_rows(&logits)?;
    Ok(Some(g.cross_entropy(all, &targets, None)?))
}

pub fn train_step_gen<T: Float>(
    model: &mut GenerativeModel<T>,
    opt: &mut AdamState<T>,
    batch: &[&TurnSample],
    features: &FeatureStore,
    mask: ModalityMask,
) -> Result<Option<f64>> {
    let mut g = Graph::new();
    let Some(loss) = gen_batch_loss(&mut g, model, batch, features, mask)? else { return Ok(None) };
    let value = g.value(loss).item().to_f64_lossy();
    let grads = g.backward(loss)?;
    let grads = grads.for_store(&model.params);
    opt.step(&mut model.params, &grads)?;
    Ok(Some(value))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenTrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub max_steps: usize,
    pub modality_mask: ModalityMask,
    /// Stop once the loss of a step falls below this value.
    pub target_loss: Option<f64>,
}

pub fn train_generative<T: Float>(
    model: &mut GenerativeModel<T>,
    train: &[TurnSample],
    features: &FeatureStore,
    cfg: &GenTrainConfig,
) -> Result<TrainReport> {
    if cfg.batch_size == 0 {
        return Err(Error::config("batch_size must be positive"));
    }
    if train.is_empty() {
        return Err(Error::contract("no training samples"));
    }
    let mut opt = AdamState::new(AdamConfig::with_lr(cfg.lr))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = TrainReport::default();
    'outer: while report.steps < cfg.max_steps {
        for idx in epoch_batches(train.len(), cfg.batch_size, &mut rng) {
            let batch: Vec<&TurnSample> = idx.iter().map(|&i| &train[i]).collect();
            let Some(loss) = train_step_gen(model, &mut opt, &batch, features, cfg.modality_mask)? else { continue };
            report.losses.push(loss);
            report.steps += 1;
            if report.steps % 100 == 0 {
                info!("step {} loss {loss:.4}", report.steps);
            }
            if report.steps >= cfg.max_steps || cfg.target_loss.is_some_and(|t| loss < t) {
                report.stopped_early = report.steps < cfg.max_steps;
                break 'outer;
            }
        }
    }
    Ok(report)
}

/// One decoded output, as written to the decode JSONL.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeRecord {
    pub context_id: String,
    pub output_text: String,
    pub logprob: f64,
}

/// Decodes every sample and reports ROUGE-L, token F1 and BLEU-4 per turn
/// and overall.
pub fn evaluate_generation<T: Float>(
    model: &GenerativeModel<T>,
    samples: &[TurnSample],
    features: &FeatureStore,
    mask: ModalityMask,
    opts: &DecodeOptions,
    seed: u64,
) -> Result<(MetricReport, Vec<DecodeRecord>)> {
    if samples.is_empty() {
        return Err(Error::contract("evaluation split is empty"));
    }
    let mut acc = MetricAccumulator::new();
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        let h = model.decode(&s.context, features, mask, opts)?;
        let text = model.hypothesis_text(&h)?;
        records.push(DecodeRecord { context_id: s.id.clone(), output_text: text.clone(), logprob: h.logprob });
        let hyp = tokenize(&text);
        let gold = tokenize(&s.gold);
        let turn = s.context.turn_index;
        acc.example(turn);
        acc.add(turn, "rouge_l", rouge_l(&hyp, &gold));
        acc.add(turn, "f1", token_f1(&hyp, &gold));
        acc.add_bleu_pair(turn, hyp, gold);
    }
    let config = json!({
        "beam_size": opts.beam_size,
        "trigram_block": opts.trigram_block,
        "max_decode_len": opts.max_len,
        "mask": mask.to_string(),
    });
    Ok((acc.finish(config, seed)?, records))
}

/// ROUGE-L per turn for each of the 7 modality masks.
pub fn run_generative_ablation<T: Float>(
    source: &AblationSource<'_, GenerativeModel<T>>,
    samples: &[TurnSample],
    features: &FeatureStore,
    opts: &DecodeOptions,
    seed: u64,
) -> Result<AblationTable> {
    let mut table = AblationTable::new("rouge_l");
    for (label, mask) in crate::combiner::ModalityMask::ablation_rows() {
        let report = match source.model_for(label) {
            None => None,
            Some(m) => Some(evaluate_generation(m, samples, features, mask, opts, seed)?.0),
        };
        table.rows.push((label.to_string(), report));
    }
    Ok(table)
}
