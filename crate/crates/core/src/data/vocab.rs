use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const START: u32 = 1;
pub const END: u32 = 2;
pub const SEP: u32 = 3;
pub const UNK: u32 = 4;

const SPECIAL: [&str; 5] = ["__pad__", "__start__", "__end__", "__sep__", "__unk__"];

/// Token/id bijection. Ids 0..5 are the special tokens, followed by one
/// reserved token per style trait, followed by content tokens.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabFile", into = "VocabFile")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    n_styles: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    n_styles: usize,
    tokens: Vec<String>,
}

impl TryFrom<VocabFile> for Vocabulary {
    type Error = Error;

    fn try_from(f: VocabFile) -> Result<Self> {
        if f.tokens.len() < SPECIAL.len() + f.n_styles || f.tokens[..SPECIAL.len()] != SPECIAL {
            return Err(Error::config("vocabulary file does not start with the reserved tokens"));
        }
        let mut index = HashMap::with_capacity(f.tokens.len());
        for (i, t) in f.tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::config(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens: f.tokens, index, n_styles: f.n_styles })
    }
}

impl From<Vocabulary> for VocabFile {
    fn from(v: Vocabulary) -> Self {
        VocabFile { n_styles: v.n_styles, tokens: v.tokens }
    }
}

pub fn style_token(name: &str) -> String {
    format!("__style:{name}__")
}

impl Vocabulary {
    /// Keeps tokens seen at least `min_freq` times, ordered by descending
    /// frequency then lexicographically.
    pub fn build<'a, I, S>(corpus: I, min_freq: usize, styles: &[S]) -> Self
    where
        I: IntoIterator<Item = &'a [String]>,
        S: AsRef<str>,
    {
        let mut freq: HashMap<&str, usize> = HashMap::new();
        for sent in corpus {
            for t in sent {
                *freq.entry(t.as_str()).or_default() += 1;
            }
        }
        let mut content: Vec<(&str, usize)> = freq.into_iter().filter(|&(_, c)| c >= min_freq.max(1)).collect();
        content.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

        let mut tokens: Vec<String> = SPECIAL.iter().map(|s| s.to_string()).collect();
        tokens.extend(styles.iter().map(|s| style_token(s.as_ref())));
        let reserved: std::collections::HashSet<String> = tokens.iter().cloned().collect();
        tokens.extend(content.into_iter().map(|(t, _)| t.to_string()).filter(|t| !reserved.contains(t)));
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Vocabulary { tokens, index, n_styles: styles.len() }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn n_styles(&self) -> usize {
        self.n_styles
    }

    /// Content tokens only.
    pub fn content_size(&self) -> usize {
        self.tokens.len() - SPECIAL.len() - self.n_styles
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: u32) -> Result<&str> {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .ok_or(Error::Vocabulary { id, size: self.tokens.len() })
    }

    /// Reserved id for the style trait at catalog index `i`.
    pub fn style_id(&self, i: usize) -> Result<u32> {
        if i < self.n_styles {
            Ok((SPECIAL.len() + i) as u32)
        } else {
            Err(Error::contract(format!("style index {i} outside the {} reserved style tokens", self.n_styles)))
        }
    }

    pub fn is_style_id(&self, id: u32) -> bool {
        let s = SPECIAL.len() as u32;
        id >= s && id < s + self.n_styles as u32
    }

    /// Ids that never appear in generated text.
    pub fn is_reserved_non_output(&self, id: u32) -> bool {
        id == PAD || id == START || id == SEP || self.is_style_id(id)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn check(&self, id: u32) -> Result<()> {
        if (id as usize) < self.tokens.len() {
            Ok(())
        } else {
            Err(Error::Vocabulary { id, size: self.tokens.len() })
        }
    }

    /// Content tokens of `ids`, stopping at the end marker and skipping
    /// other reserved ids.
    pub fn decode(&self, ids: &[u32]) -> Result<Vec<String>> {
        let mut out = Vec::new();
        for &id in ids {
            if id == END {
                break;
            }
            if id == PAD || id == START || id == SEP || self.is_style_id(id) {
                continue;
            }
            out.push(self.token(id)?.to_string());
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn min_freq_cutoff() {
        let corpus = [toks("a a b")];
        let v = Vocabulary::build(corpus.iter().map(Vec::as_slice), 2, &[] as &[&str]);
        assert!(v.contains("a"));
        assert_eq!(v.id("b"), UNK);
        assert_eq!(v.content_size(), 1);
        let v1 = Vocabulary::build(corpus.iter().map(Vec::as_slice), 1, &[] as &[&str]);
        assert!(v1.contains("a") && v1.contains("b"));
    }

    #[test]
    fn deterministic_ids_and_reserved_prefix() {
        let corpus = [toks("z y y x x x"), toks("w")];
        let a = Vocabulary::build(corpus.iter().map(Vec::as_slice), 1, &["Sweet", "Gloomy"]);
        let b = Vocabulary::build(corpus.iter().map(Vec::as_slice), 1, &["Sweet", "Gloomy"]);
        assert_eq!(a, b);
        assert_eq!(a.id("x"), 7);
        assert_eq!(a.id("y"), 8);
        assert_eq!(a.id("w"), 9);
        assert_eq!(a.id("z"), 10);
        assert_eq!(a.style_id(1).unwrap(), 6);
        assert_eq!(a.token(6).unwrap(), "__style:Gloomy__");
        let json = serde_json::to_string(&a).unwrap();
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn decode_stops_at_end() {
        let corpus = [toks("hi there")];
        let v = Vocabulary::build(corpus.iter().map(Vec::as_slice), 1, &[] as &[&str]);
        let ids = [START, v.id("hi"), v.id("there"), END, v.id("hi")];
        assert_eq!(v.decode(&ids).unwrap(), ["hi", "there"]);
        assert!(v.decode(&[999]).is_err());
    }
}
