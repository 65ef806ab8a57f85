//! Generative model: a Transformer encoder over style token and history
//! with the projected image appended, and a Transformer decoder trained by
//! teacher forcing and decoded by beam search with trigram blocking.

pub mod decode;
pub mod model;
pub mod train;

pub use decode::{has_repeated_trigram, repeats_trigram, BeamHypothesis, DecodeOptions};
pub use model::{EncodedInput, GenConfig, GenerativeModel};
pub use train::{
    evaluate_generation, gen_batch_loss, run_generative_ablation, train_generative, train_step_gen, DecodeRecord, GenTrainConfig,
};
