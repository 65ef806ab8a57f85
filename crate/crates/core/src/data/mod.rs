//! Dataset schema and everything needed to turn raw records into model
//! inputs.

pub mod catalog;
pub mod dataset;
pub mod features;
pub mod igc;
pub mod stats;
pub mod synthetic;
pub mod tokenize;
pub mod vocab;

pub use catalog::{StyleCatalog, StyleClass, StyleTrait};
pub use dataset::{
    all_turn_samples, build_candidate_store, load_dataset, make_turn_contexts, parse_dataset, DialogueExample,
    LineError, LoadReport, Speaker, Split, Turn, TurnContext, TurnSample,
};
pub use features::{FeatureStore, ImageFeatureVector, IMAGE_FEATURE_DIM};
pub use igc::{igc_adapt, igc_samples, load_igc, parse_igc, IgcExample};
pub use stats::{dataset_stats, DatasetStats};
pub use tokenize::{is_question, join_tokens, tokenize};
pub use vocab::Vocabulary;

/// Vocabulary over every utterance in `examples`, with one reserved token
/// per catalog trait.
pub fn build_vocab(examples: &[DialogueExample], min_freq: usize, catalog: &StyleCatalog) -> Vocabulary {
    let sents: Vec<Vec<String>> =
        examples.iter().flat_map(|ex| ex.turns.iter().map(|t| tokenize(&t.text))).collect();
    let styles: Vec<&str> = catalog.names().collect();
    Vocabulary::build(sents.iter().map(Vec::as_slice), min_freq, &styles)
}
