use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use super::model::{MaskMode, RetrievalModel};
use crate::combiner::{score_values, ModalityMask};
use crate::data::{tokenize, FeatureStore, TurnContext, TurnSample};
use crate::diff::Float;
use crate::error::{Error, Result};
use crate::metrics::{recall_at_k, IrBaseline, MetricAccumulator, MetricReport, RankingResult};

/// Anything that can score response candidates for a sample.
pub trait CandidateScorer: Sync {
    fn score(&self, sample: &TurnSample, candidates: &[&str]) -> Result<Vec<f64>>;
}

/// Scores with a retrieval model under a modality mask.
pub struct ModelScorer<'a, T: Float> {
    model: &'a RetrievalModel<T>,
    features: &'a FeatureStore,
    fingerprint: String,
    pub mask: ModalityMask,
    pub mode: MaskMode,
}

impl<'a, T: Float> ModelScorer<'a, T> {
    pub fn new(model: &'a RetrievalModel<T>, features: &'a FeatureStore) -> Self {
        ModelScorer { model, features, fingerprint: model.fingerprint(), mask: ModalityMask::FULL, mode: MaskMode::Omit }
    }

    /// Reuses a fingerprint computed earlier for the same parameters.
    pub fn new_with_fingerprint(model: &'a RetrievalModel<T>, features: &'a FeatureStore, fingerprint: String) -> Self {
        ModelScorer { model, features, fingerprint, mask: ModalityMask::FULL, mode: MaskMode::Omit }
    }

    pub fn with_mask(mut self, mask: ModalityMask, mode: MaskMode) -> Self {
        self.mask = mask;
        self.mode = mode;
        self
    }

    pub fn score_context(&self, ctx: &TurnContext, candidates: &[&str]) -> Result<Vec<f64>> {
        let r_t = self.model.context_value(ctx, self.features, self.mask, self.mode)?;
        let encoded = candidates
            .iter()
            .map(|c| self.model.candidate_value(&self.fingerprint, c))
            .collect::<Result<Vec<_>>>()?;
        Ok(score_values(r_t.data(), &encoded)?.into_iter().map(|s| s.to_f64_lossy()).collect())
    }
}

impl<T: Float> CandidateScorer for ModelScorer<'_, T> {
    fn score(&self, sample: &TurnSample, candidates: &[&str]) -> Result<Vec<f64>> {
        self.score_context(&sample.context, candidates)
    }
}

/// Scores 1 for the gold response and 0 otherwise.
pub struct OracleScorer;

impl CandidateScorer for OracleScorer {
    fn score(&self, sample: &TurnSample, candidates: &[&str]) -> Result<Vec<f64>> {
        Ok(candidates.iter().map(|c| if *c == sample.gold { 1.0 } else { 0.0 }).collect())
    }
}

/// Uniform random scores, reproducible from the seed and sample id.
pub struct RandomScorer {
    pub seed: u64,
}

impl CandidateScorer for RandomScorer {
    fn score(&self, sample: &TurnSample, candidates: &[&str]) -> Result<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &sample.id));
        Ok(candidates.iter().map(|_| rng.random::<f64>()).collect())
    }
}

/// The word-overlap baseline, matching candidates against the history.
pub struct IrScorer {
    pub baseline: IrBaseline,
}

impl CandidateScorer for IrScorer {
    fn score(&self, sample: &TurnSample, candidates: &[&str]) -> Result<Vec<f64>> {
        let ctx: Vec<String> = sample.context.history.iter().flat_map(|h| tokenize(h)).collect();
        Ok(candidates.iter().map(|c| self.baseline.score(&ctx, &tokenize(c))).collect())
    }
}

pub(crate) fn derive_seed(seed: u64, id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(id.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Distinct responses of a split, in first-seen order.
pub fn response_pool(samples: &[TurnSample]) -> Vec<String> {
    let mut seen = HashSet::new();
    samples.iter().filter(|s| seen.insert(s.gold.as_str())).map(|s| s.gold.clone()).collect()
}

/// The gold plus `n - 1` distractors drawn without replacement from the
/// pool, as ascending pool indices. Deterministic in (seed, sample id).
pub fn candidate_set(pool: &[String], pool_index: &HashMap<&str, usize>, sample: &TurnSample, n: usize, seed: u64) -> Result<Vec<usize>> {
    let gold = *pool_index
        .get(sample.gold.as_str())
        .ok_or_else(|| Error::contract(format!("gold of {} is not in the candidate pool", sample.id)))?;
    if n == 0 || pool.len() < n {
        return Err(Error::contract(format!("candidate pool of {} cannot supply {n} candidates", pool.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &sample.id));
    let mut ids: Vec<usize> = index::sample(&mut rng, pool.len() - 1, n - 1)
        .into_iter()
        .map(|j| if j >= gold { j + 1 } else { j })
        .collect();
    ids.push(gold);
    ids.sort_unstable();
    Ok(ids)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallOptions {
    pub n_candidates: usize,
    pub ks: Vec<usize>,
    pub seed: u64,
    pub mask: ModalityMask,
}

impl Default for RecallOptions {
    fn default() -> Self {
        RecallOptions { n_candidates: 100, ks: vec![1, 5], seed: 0, mask: ModalityMask::FULL }
    }
}

/// Per-sample outcome of a recall evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedSample {
    pub sample_id: String,
    pub turn: usize,
    pub candidates: Vec<usize>,
    pub gold_rank: usize,
}

/// Gold rank of every sample among `n_candidates` same-split candidates.
pub fn rank_samples<S: CandidateScorer + ?Sized>(scorer: &S, samples: &[TurnSample], opts: &RecallOptions) -> Result<Vec<RankedSample>> {
    if samples.is_empty() {
        return Err(Error::contract("evaluation split is empty"));
    }
    let pool = response_pool(samples);
    let pool_index: HashMap<&str, usize> = pool.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    samples
        .iter()
        .map(|s| {
            let ids = candidate_set(&pool, &pool_index, s, opts.n_candidates, opts.seed)?;
            let texts: Vec<&str> = ids.iter().map(|&i| pool[i].as_str()).collect();
            let scores = scorer.score(s, &texts)?;
            let ranking = RankingResult::from_scores(&ids, &scores, Some(pool_index[s.gold.as_str()]))?;
            Ok(RankedSample {
                sample_id: s.id.clone(),
                turn: s.context.turn_index,
                candidates: ids,
                gold_rank: ranking.gold_rank.expect("gold supplied"),
            })
        })
        .collect()
}

/// R@k per turn and overall.
pub fn evaluate_recall<S: CandidateScorer + ?Sized>(scorer: &S, samples: &[TurnSample], opts: &RecallOptions) -> Result<MetricReport> {
    let ranked = rank_samples(scorer, samples, opts)?;
    recall_report(&ranked, opts)
}

pub fn recall_report(ranked: &[RankedSample], opts: &RecallOptions) -> Result<MetricReport> {
    let mut acc = MetricAccumulator::new();
    for r in ranked {
        acc.example(r.turn);
        for &k in &opts.ks {
            let hit = recall_at_k(&[r.gold_rank], k, opts.n_candidates)?;
            acc.add(r.turn, &format!("r{k}"), hit);
        }
    }
    acc.finish(json!({"n_candidates": opts.n_candidates, "ks": opts.ks, "mask": opts.mask.to_string()}), opts.seed)
}

/// Ranks an explicit candidate list for one context. Candidate ids are
/// list positions.
pub fn rank_candidates<T: Float>(
    model: &RetrievalModel<T>,
    features: &FeatureStore,
    ctx: &TurnContext,
    candidates: &[&str],
    mask: ModalityMask,
) -> Result<RankingResult> {
    if candidates.is_empty() {
        return Err(Error::contract("no candidates to rank"));
    }
    let scores = ModelScorer::new(model, features).with_mask(mask, MaskMode::Omit).score_context(ctx, candidates)?;
    let ids: Vec<usize> = (0..candidates.len()).collect();
    RankingResult::from_scores(&ids, &scores, None)
}

/// Ablation layout: one metric per turn for each of the 7 modality masks.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub metric: String,
    pub rows: Vec<(String, Option<MetricReport>)>,
}

impl AblationTable {
    pub fn new(metric: &str) -> Self {
        AblationTable { metric: metric.to_string(), rows: Vec::new() }
    }

    pub fn get(&self, label: &str) -> Option<&MetricReport> {
        self.rows.iter().find(|(l, _)| l == label).and_then(|(_, r)| r.as_ref())
    }

    pub fn to_json(&self) -> serde_json::Value {
        let rows: BTreeMap<&str, serde_json::Value> = self
            .rows
            .iter()
            .map(|(l, r)| (l.as_str(), r.as_ref().map_or(serde_json::Value::Null, MetricReport::to_json)))
            .collect();
        json!({"metric": self.metric, "rows": rows})
    }
}

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<40}{:>9}{:>9}{:>9}{:>9}", format!("Modules ({})", self.metric), "Turn 1", "Turn 2", "Turn 3", "All")?;
        for (label, report) in &self.rows {
            write!(f, "{label:<40}")?;
            match report {
                None => writeln!(f, "{:>9}", "absent")?,
                Some(r) => {
                    for t in 1..=3 {
                        match r.get(Some(t), &self.metric) {
                            Some(v) => write!(f, "{:>9.1}", 100.0 * v)?,
                            None => write!(f, "{:>9}", "-")?,
                        }
                    }
                    match r.get(None, &self.metric) {
                        Some(v) => writeln!(f, "{:>9.1}", 100.0 * v)?,
                        None => writeln!(f, "{:>9}", "-")?,
                    }
                }
            }
        }
        Ok(())
    }
}

/// Models for the ablation: one model masked at evaluation time, or one
/// trained model per mask label (missing labels become absent rows).
pub enum AblationSource<'a, M> {
    Single(&'a M),
    PerMask(BTreeMap<String, &'a M>),
}

impl<'a, M> AblationSource<'a, M> {
    pub fn model_for(&self, label: &str) -> Option<&'a M> {
        match self {
            AblationSource::Single(m) => Some(*m),
            AblationSource::PerMask(map) => map.get(label).copied(),
        }
    }
}

pub fn run_ablation_matrix<T: Float>(
    source: &AblationSource<'_, RetrievalModel<T>>,
    samples: &[TurnSample],
    features: &FeatureStore,
    opts: &RecallOptions,
    mode: MaskMode,
) -> Result<AblationTable> {
    let mut table = AblationTable::new("r1");
    for (label, mask) in ModalityMask::ablation_rows() {
        let report = match source.model_for(label) {
            None => None,
            Some(m) => {
                let scorer = ModelScorer::new(m, features).with_mask(mask, mode);
                Some(evaluate_recall(&scorer, samples, &RecallOptions { mask, ..opts.clone() })?)
            }
        };
        table.rows.push((label.to_string(), report));
    }
    Ok(table)
}
