#![allow(dead_code)]

use std::path::{Path, PathBuf};

use imagechat::data::dataset::write_dataset;
use imagechat::data::synthetic::{toy_corpus, ToyCorpus, ToyCorpusConfig};
use imagechat::data::Split;
use num_bigint::{BigInt, BigUint};
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

pub struct ToyFiles {
    pub corpus: ToyCorpus,
    pub data: PathBuf,
    pub features: PathBuf,
    pub catalog: PathBuf,
}

/// A toy corpus on disk: the last `n_valid` dialogues form the validation
/// split, the rest are training dialogues.
pub fn write_toy(dir: &Path, n: usize, n_valid: usize, turns: usize, seed: u64) -> ToyFiles {
    let mut corpus = toy_corpus(&ToyCorpusConfig { n_examples: n, turns, seed, ..Default::default() });
    for ex in corpus.examples.iter_mut().skip(n - n_valid) {
        ex.split = Split::Valid;
    }
    let data = dir.join("data.jsonl");
    let features = dir.join("features.imf");
    let catalog = dir.join("catalog.tsv");
    write_dataset(&data, &corpus.examples).unwrap();
    corpus.features.save(&features).unwrap();
    std::fs::write(&catalog, corpus.catalog.to_text()).unwrap();
    ToyFiles { corpus, data, features, catalog }
}

pub fn random_tokens(rng: &mut ChaCha8Rng, max_len: usize, alphabet: usize) -> Vec<String> {
    let n = rng.random_range(0..=max_len);
    (0..n).map(|_| format!("w{}", rng.random_range(0..alphabet))).collect()
}

/// LCS by the full (n+1)x(m+1) table.
pub fn lcs_table(a: &[String], b: &[String]) -> usize {
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            t[i][j] = if a[i - 1] == b[j - 1] { t[i - 1][j - 1] + 1 } else { t[i - 1][j].max(t[i][j - 1]) };
        }
    }
    t[a.len()][b.len()]
}

/// LCS by enumerating every subsequence of `a`; only for short inputs.
pub fn lcs_brute(a: &[String], b: &[String]) -> usize {
    assert!(a.len() <= 14);
    let is_subseq = |sub: &[&String]| {
        let mut it = b.iter();
        sub.iter().all(|x| it.any(|y| y == *x))
    };
    let mut best = 0;
    for bits in 0u32..(1 << a.len()) {
        let sub: Vec<&String> = (0..a.len()).filter(|i| bits >> i & 1 == 1).map(|i| &a[i]).collect();
        if sub.len() > best && is_subseq(&sub) {
            best = sub.len();
        }
    }
    best
}

pub fn f_from_overlap(overlap: usize, h: usize, r: usize) -> f64 {
    if overlap == 0 || h == 0 || r == 0 {
        return 0.0;
    }
    let p = overlap as f64 / h as f64;
    let rc = overlap as f64 / r as f64;
    2.0 * p * rc / (p + rc)
}

pub fn rouge_oracle(h: &[String], r: &[String]) -> f64 {
    f_from_overlap(lcs_table(h, r), h.len(), r.len())
}

/// Multiset overlap by repeatedly removing matched reference tokens.
pub fn f1_oracle(h: &[String], r: &[String]) -> f64 {
    let mut pool: Vec<&String> = r.iter().collect();
    let mut overlap = 0;
    for t in h {
        if let Some(pos) = pool.iter().position(|x| *x == t) {
            pool.remove(pos);
            overlap += 1;
        }
    }
    f_from_overlap(overlap, h.len(), r.len())
}

fn occurrences(toks: &[String], gram: &[String]) -> usize {
    if toks.len() < gram.len() {
        return 0;
    }
    (0..=toks.len() - gram.len()).filter(|&i| &toks[i..i + gram.len()] == gram).count()
}

/// Clipped n-gram matches and totals for one sentence pair, by scanning.
pub fn clipped_counts(h: &[String], r: &[String], n: usize) -> (usize, usize) {
    if h.len() < n {
        return (0, 0);
    }
    let mut matches = 0;
    for i in 0..=h.len() - n {
        let g = &h[i..i + n];
        let first = (0..i).all(|j| &h[j..j + n] != g);
        if first {
            matches += occurrences(h, g).min(occurrences(r, g));
        }
    }
    (matches, h.len() - n + 1)
}

pub struct BleuOracle {
    pub matches: [usize; 4],
    pub totals: [usize; 4],
    pub hyp_len: usize,
    pub ref_len: usize,
    pub smoothed: f64,
    pub unsmoothed: f64,
}

pub fn bleu_oracle(hyps: &[Vec<String>], refs: &[Vec<String>]) -> BleuOracle {
    let mut matches = [0; 4];
    let mut totals = [0; 4];
    let (mut c, mut r) = (0, 0);
    for (h, rf) in hyps.iter().zip(refs) {
        c += h.len();
        r += rf.len();
        for n in 1..=4 {
            let (m, t) = clipped_counts(h, rf, n);
            matches[n - 1] += m;
            totals[n - 1] += t;
        }
    }
    let bp = if c == 0 {
        0.0
    } else if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    let score = |smooth: bool| {
        let mut s = 0.0;
        for n in 0..4 {
            let add = usize::from(smooth && n > 0);
            let (m, t) = (matches[n] + add, totals[n] + add);
            if m == 0 || t == 0 {
                return 0.0;
            }
            s += 0.25 * (m as f64 / t as f64).ln();
        }
        bp * s.exp()
    };
    BleuOracle { matches, totals, hyp_len: c, ref_len: r, smoothed: score(true), unsmoothed: score(false) }
}

/// Two-sided p-value by enumerating Pascal's row and summing every outcome
/// whose probability does not exceed the observed one.
pub fn binomial_oracle(wins: u64, n: u64) -> f64 {
    let mut row = vec![BigUint::from(1u32)];
    for _ in 0..n {
        let mut next = vec![BigUint::from(1u32); row.len() + 1];
        for k in 1..row.len() {
            next[k] = &row[k - 1] + &row[k];
        }
        row = next;
    }
    let observed = &row[wins as usize];
    let mut sum = BigUint::zero();
    for c in &row {
        if c <= observed {
            sum += c;
        }
    }
    let total: BigUint = row.iter().sum();
    let p = BigRational::new(BigInt::from(sum), BigInt::from(total));
    p.to_f64().unwrap().min(1.0)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
