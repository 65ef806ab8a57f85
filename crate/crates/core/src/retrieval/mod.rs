//! Retrieval model: dual encoders over (image, style, history) and
//! responses, trained with in-batch negatives and evaluated by R@k.

pub mod eval;
pub mod model;
pub mod train;

pub use eval::{
    evaluate_recall, rank_candidates, rank_samples, recall_report, response_pool, run_ablation_matrix, AblationSource,
    AblationTable, CandidateScorer, IrScorer, ModelScorer, OracleScorer, RandomScorer, RankedSample, RecallOptions,
};
pub use model::{CandidateCache, MaskMode, RetrievalConfig, RetrievalModel};
pub use train::{
    batch_loss, negative_mask, pairs_from_samples, pretrain, pretrain_loss, pretrain_step, train_retrieval, train_step,
    PretrainConfig, RetrievalTrainConfig, TrainReport, UtterancePair,
};
