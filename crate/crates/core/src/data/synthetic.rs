//! Seeded toy corpora for smoke runs and tests.

use std::collections::HashSet;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::catalog::StyleCatalog;
use crate::data::dataset::{DialogueExample, Speaker, Split, Turn};
use crate::data::features::{FeatureStore, ImageFeatureVector, IMAGE_FEATURE_DIM};

const WORDS: &[&str] = &[
    "the", "a", "dog", "cat", "sun", "sky", "tree", "river", "food", "cake", "red", "blue", "green", "happy", "sad",
    "bright", "dark", "small", "big", "old", "new", "love", "hate", "see", "want", "eat", "run", "jump", "sleep",
    "look", "that", "this", "is", "so", "very", "nice", "ugly", "pretty", "funny", "strange", "calm", "loud", "quiet",
    "warm", "cold", "sweet", "bitter", "soft", "hard", "fast", "slow", "sea", "hill", "flower", "bird", "car", "road",
    "house", "light", "rain", "snow", "wind", "cloud", "star", "moon", "day", "night", "boat", "shoe", "hat",
];

#[derive(Clone, Debug)]
pub struct ToyCorpusConfig {
    pub n_examples: usize,
    pub turns: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub split: Split,
    pub seed: u64,
}

impl Default for ToyCorpusConfig {
    fn default() -> Self {
        ToyCorpusConfig { n_examples: 50, turns: 3, min_words: 3, max_words: 6, split: Split::Train, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct ToyCorpus {
    pub catalog: StyleCatalog,
    pub examples: Vec<DialogueExample>,
    pub features: FeatureStore,
}

/// Dialogues with globally unique utterances over a fixed small word list,
/// one distinct image per dialogue.
pub fn toy_corpus(cfg: &ToyCorpusConfig) -> ToyCorpus {
    let catalog = StyleCatalog::miniature();
    let names: Vec<&str> = catalog.names().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut seen = HashSet::new();
    let mut examples = Vec::with_capacity(cfg.n_examples);
    for i in 0..cfg.n_examples {
        let turns = (0..cfg.turns.clamp(1, 3))
            .map(|t| {
                let text = loop {
                    let n = rng.random_range(cfg.min_words..=cfg.max_words.max(cfg.min_words));
                    let words: Vec<&str> = (0..n).map(|_| *WORDS.choose(&mut rng).expect("nonempty")).collect();
                    let s = format!("{} .", words.join(" "));
                    if seen.insert(s.clone()) {
                        break s;
                    }
                };
                Turn { speaker: if t % 2 == 0 { Speaker::A } else { Speaker::B }, text }
            })
            .collect();
        examples.push(DialogueExample {
            v: 1,
            image_id: format!("img{i:04}"),
            style_a: names.choose(&mut rng).expect("nonempty").to_string(),
            style_b: names.choose(&mut rng).expect("nonempty").to_string(),
            split: cfg.split,
            turns,
        });
    }
    let ids: Vec<String> = examples.iter().map(|e| e.image_id.clone()).collect();
    let features = random_features(&ids, cfg.seed.wrapping_add(1));
    ToyCorpus { catalog, examples, features }
}

/// Standard-normal feature rows, one per id.
pub fn random_features(ids: &[String], seed: u64) -> FeatureStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f32, 1.0).expect("valid");
    let mut store = FeatureStore::new();
    for id in ids {
        let values = (0..IMAGE_FEATURE_DIM).map(|_| normal.sample(&mut rng)).collect();
        store.insert(ImageFeatureVector::new(id.clone(), values).expect("finite 2048-d")).expect("unique ids");
    }
    store
}
