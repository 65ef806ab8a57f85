use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::data::dataset::DialogueExample;
use crate::data::tokenize::tokenize;

/// Corpus counts in the layout of the dataset statistics table.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub images: usize,
    pub dialogues: usize,
    pub utterances: usize,
    pub style_types: usize,
    pub vocab_size: usize,
    pub mean_tokens_per_utterance: f64,
}

pub fn dataset_stats(examples: &[DialogueExample]) -> DatasetStats {
    let mut images = HashSet::new();
    let mut styles = HashSet::new();
    let mut vocab = HashSet::new();
    let mut utterances = 0;
    let mut tokens = 0;
    for ex in examples {
        images.insert(ex.image_id.as_str());
        styles.insert(ex.style_a.as_str());
        styles.insert(ex.style_b.as_str());
        for t in &ex.turns {
            utterances += 1;
            let toks = tokenize(&t.text);
            tokens += toks.len();
            vocab.extend(toks);
        }
    }
    DatasetStats {
        images: images.len(),
        dialogues: examples.len(),
        utterances,
        style_types: styles.len(),
        vocab_size: vocab.len(),
        mean_tokens_per_utterance: if utterances == 0 { 0.0 } else { tokens as f64 / utterances as f64 },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::dataset::{Speaker, Split, Turn};

    fn ex(image: &str, texts: &[&str]) -> DialogueExample {
        DialogueExample {
            v: 1,
            image_id: image.into(),
            style_a: "Sweet".into(),
            style_b: "Gloomy".into(),
            split: Split::Train,
            turns: texts
                .iter()
                .enumerate()
                .map(|(i, t)| Turn { speaker: if i % 2 == 0 { Speaker::A } else { Speaker::B }, text: t.to_string() })
                .collect(),
        }
    }

    #[test]
    fn counts_fixture() {
        let s = dataset_stats(&[ex("i1", &["a b", "b c d", "e"]), ex("i2", &["a", "a a", "f g h i"])]);
        assert_eq!(s.utterances, 6);
        assert_eq!(s.dialogues, 2);
        assert_eq!(s.images, 2);
        assert_eq!(s.style_types, 2);
        assert_eq!(s.vocab_size, 9);
        assert!((s.mean_tokens_per_utterance - 13.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn empty_is_all_zero() {
        assert_eq!(dataset_stats(&[]), DatasetStats::default());
    }
}
