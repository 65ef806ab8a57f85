//! Evaluation metrics: ranking recall, text overlap, the word-overlap
//! baseline and the paired-preference significance test.

pub mod binomial;
pub mod overlap;
pub mod ranking;
pub mod report;

pub use binomial::{binomial_two_tailed, PreferenceTally};
pub use overlap::{bleu4, bleu_from_counts, lcs_len, rouge_l, rouge_l_prf, token_f1, BleuScore, Prf};
pub use ranking::{recall_at_k, IrBaseline, RankedCandidate, RankingResult};
pub use report::{MetricAccumulator, MetricReport};
