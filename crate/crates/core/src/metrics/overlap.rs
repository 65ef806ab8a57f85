//! Text-overlap metrics over token sequences.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Length of the longest common subsequence.
pub fn lcs_len<S: PartialEq>(a: &[S], b: &[S]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    const ZERO: Prf = Prf { precision: 0.0, recall: 0.0, f1: 0.0 };

    fn from_overlap(overlap: usize, hyp_len: usize, ref_len: usize) -> Prf {
        if overlap == 0 || hyp_len == 0 || ref_len == 0 {
            return Prf::ZERO;
        }
        let precision = overlap as f64 / hyp_len as f64;
        let recall = overlap as f64 / ref_len as f64;
        Prf { precision, recall, f1: 2.0 * precision * recall / (precision + recall) }
    }
}

/// ROUGE-L with beta = 1.
pub fn rouge_l_prf<S: PartialEq>(hyp: &[S], reference: &[S]) -> Prf {
    Prf::from_overlap(lcs_len(hyp, reference), hyp.len(), reference.len())
}

pub fn rouge_l<S: PartialEq>(hyp: &[S], reference: &[S]) -> f64 {
    rouge_l_prf(hyp, reference).f1
}

/// Harmonic mean of multiset-overlap precision and recall.
pub fn token_f1<S: AsRef<str>>(hyp: &[S], reference: &[S]) -> f64 {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in reference {
        *counts.entry(t.as_ref()).or_default() += 1;
    }
    let mut overlap = 0;
    for t in hyp {
        if let Some(c) = counts.get_mut(t.as_ref()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    Prf::from_overlap(overlap, hyp.len(), reference.len()).f1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BleuScore {
    /// Add-one smoothing on the 2- to 4-gram precisions.
    pub smoothed: f64,
    pub unsmoothed: f64,
    pub matches: [usize; 4],
    pub totals: [usize; 4],
    pub hyp_len: usize,
    pub ref_len: usize,
    pub brevity_penalty: f64,
}

fn ngram_counts<S: AsRef<str>>(toks: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut m = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w.iter().map(AsRef::as_ref).collect()).or_default() += 1;
        }
    }
    m
}

/// Corpus BLEU-4 with clipped n-gram precisions pooled over the corpus and
/// a corpus-level brevity penalty. Scores are in [0, 1].
pub fn bleu4<S: AsRef<str>>(hyps: &[Vec<S>], refs: &[Vec<S>]) -> Result<BleuScore> {
    if hyps.is_empty() {
        return Err(Error::contract("BLEU over an empty corpus"));
    }
    if hyps.len() != refs.len() {
        return Err(Error::contract("BLEU corpora are not aligned"));
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, r) in hyps.iter().zip(refs) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(r, n);
            for (g, &c) in &hc {
                matches[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    Ok(bleu_from_counts(matches, totals, hyp_len, ref_len))
}

/// BLEU from pooled counts.
pub fn bleu_from_counts(matches: [usize; 4], totals: [usize; 4], hyp_len: usize, ref_len: usize) -> BleuScore {
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    let geo = |smooth: bool| -> f64 {
        let mut log_sum = 0.0;
        for n in 0..4 {
            let (m, t) = if smooth && n > 0 { (matches[n] + 1, totals[n] + 1) } else { (matches[n], totals[n]) };
            if m == 0 || t == 0 {
                return 0.0;
            }
            log_sum += 0.25 * (m as f64 / t as f64).ln();
        }
        log_sum.exp()
    };
    BleuScore {
        smoothed: brevity_penalty * geo(true),
        unsmoothed: brevity_penalty * geo(false),
        matches,
        totals,
        hyp_len,
        ref_len,
        brevity_penalty,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge_l(&t("a b c"), &t("a b c")), 1.0);
        let prf = rouge_l_prf(&t("the cat sat"), &t("the cat sat on the mat"));
        assert_eq!(prf.precision, 1.0);
        assert_eq!(prf.recall, 0.5);
        assert!((prf.f1 - 0.6667).abs() < 1e-4);
        assert_eq!(rouge_l(&t("x y"), &t("a b")), 0.0);
        assert_eq!(rouge_l(&t(""), &t("a b")), 0.0);
    }

    #[test]
    fn f1_examples() {
        assert!((token_f1(&t("a b c"), &t("b c d")) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(token_f1(&t("a b"), &t("a b")), 1.0);
        assert_eq!(token_f1(&t(""), &t("a b")), 0.0);
        // multiset: repeated hypothesis tokens only match as often as the reference has them
        assert!((token_f1(&t("a a a"), &t("a b")) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn bleu_identity_and_brevity() {
        let refs = vec![t("the cat sat on the mat today"), t("a dog ran")];
        let b = bleu4(&refs, &refs).unwrap();
        assert_eq!(b.smoothed, 1.0);
        assert_eq!(b.brevity_penalty, 1.0);

        let short = bleu4(&[t("the")], &[t("the cat sat on the mat")]).unwrap();
        assert!(short.brevity_penalty < 1.0);
        let unigram_precision = short.matches[0] as f64 / short.totals[0] as f64;
        assert_eq!(unigram_precision, 1.0);
        assert!(short.smoothed < unigram_precision);
        // BP = exp(1 - 6/1), smoothed p2..p4 = 1/1
        assert!((short.smoothed - (-5.0f64).exp()).abs() < 1e-15);
        assert_eq!(short.unsmoothed, 0.0);
    }

    #[test]
    fn bleu_errors() {
        assert!(bleu4::<String>(&[], &[]).is_err());
        assert!(bleu4(&[t("a")], &[t("a"), t("b")]).is_err());
    }
}
