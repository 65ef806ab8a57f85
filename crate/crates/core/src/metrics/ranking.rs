use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedCandidate {
    pub id: usize,
    pub score: f64,
}

/// Candidates in descending score order and the 1-based rank of the gold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingResult {
    pub ranked: Vec<RankedCandidate>,
    pub gold_rank: Option<usize>,
}

impl RankingResult {
    /// Sorts by descending score; equal scores keep ascending id order.
    pub fn from_scores(ids: &[usize], scores: &[f64], gold: Option<usize>) -> Result<Self> {
        if ids.len() != scores.len() {
            return Err(Error::contract("one score per candidate id"));
        }
        if ids.is_empty() {
            return Err(Error::contract("nothing to rank"));
        }
        if scores.iter().any(|s| s.is_nan()) {
            return Err(Error::NonFinite("candidate scores"));
        }
        let mut ranked: Vec<RankedCandidate> =
            ids.iter().zip(scores).map(|(&id, &score)| RankedCandidate { id, score }).collect();
        ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.id.cmp(&b.id)));
        let gold_rank = match gold {
            None => None,
            Some(g) => {
                let hits: Vec<usize> = ranked.iter().enumerate().filter(|(_, c)| c.id == g).map(|(i, _)| i + 1).collect();
                if hits.len() != 1 {
                    return Err(Error::contract(format!("gold id {g} appears {} times among candidates", hits.len())));
                }
                Some(hits[0])
            }
        };
        Ok(RankingResult { ranked, gold_rank })
    }

    pub fn top(&self) -> &RankedCandidate {
        &self.ranked[0]
    }
}

/// Fraction of gold ranks at or above `k`.
pub fn recall_at_k(gold_ranks: &[usize], k: usize, n_candidates: usize) -> Result<f64> {
    if gold_ranks.is_empty() {
        return Err(Error::contract("recall over no ranks"));
    }
    if let Some(&r) = gold_ranks.iter().find(|&&r| r == 0 || r > n_candidates) {
        return Err(Error::contract(format!("rank {r} outside 1..={n_candidates}")));
    }
    Ok(gold_ranks.iter().filter(|&&r| r <= k).count() as f64 / gold_ranks.len() as f64)
}

/// Word-overlap ranking baseline.
///
/// A candidate scores the sum, over word types it shares with the context,
/// of `1 / (1 + ln(1 + f))`, where `f` is the word's frequency among the
/// training responses.
#[derive(Clone, Debug, Default)]
pub struct IrBaseline {
    freq: HashMap<String, usize>,
}

impl IrBaseline {
    pub fn fit<'a, I>(responses: I) -> Self
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        let mut freq = HashMap::new();
        for r in responses {
            for t in r {
                *freq.entry(t.clone()).or_default() += 1;
            }
        }
        IrBaseline { freq }
    }

    pub fn weight(&self, token: &str) -> f64 {
        let f = self.freq.get(token).copied().unwrap_or(0) as f64;
        1.0 / (1.0 + (1.0 + f).ln())
    }

    pub fn score(&self, context: &[String], candidate: &[String]) -> f64 {
        let ctx: HashSet<&str> = context.iter().map(String::as_str).collect();
        let cand: HashSet<&str> = candidate.iter().map(String::as_str).collect();
        let mut shared: Vec<&str> = ctx.intersection(&cand).copied().collect();
        shared.sort_unstable();
        shared.iter().map(|t| self.weight(t)).sum()
    }

    /// Ranks candidates; ties keep input order.
    pub fn rank(&self, context: &[String], candidates: &[Vec<String>], gold: Option<usize>) -> Result<RankingResult> {
        let ids: Vec<usize> = (0..candidates.len()).collect();
        let scores: Vec<f64> = candidates.iter().map(|c| self.score(context, c)).collect();
        RankingResult::from_scores(&ids, &scores, gold)
    }
}
