use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::catalog::StyleCatalog;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Speaker {
    A,
    B,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            _ => Err(Error::config(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: String,
}

/// One dialogue about one image between two styled speakers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueExample {
    #[serde(default = "schema_version")]
    pub v: u32,
    pub image_id: String,
    pub style_a: String,
    pub style_b: String,
    pub split: Split,
    pub turns: Vec<Turn>,
}

fn schema_version() -> u32 {
    1
}

impl DialogueExample {
    pub fn validate(&self, catalog: &StyleCatalog) -> Result<()> {
        if self.v != 1 {
            return Err(Error::contract(format!("unsupported schema version {}", self.v)));
        }
        if self.image_id.is_empty() {
            return Err(Error::contract("empty image_id"));
        }
        for s in [&self.style_a, &self.style_b] {
            catalog.index_of(s)?;
        }
        if self.turns.is_empty() || self.turns.len() > 3 {
            return Err(Error::contract(format!("expected 1-3 turns, got {}", self.turns.len())));
        }
        for (i, t) in self.turns.iter().enumerate() {
            let want = if i % 2 == 0 { Speaker::A } else { Speaker::B };
            if t.speaker != want {
                return Err(Error::contract(format!("turn {} spoken by {:?}, expected {want:?}", i + 1, t.speaker)));
            }
            if t.text.trim().is_empty() {
                return Err(Error::contract(format!("turn {} is empty", i + 1)));
            }
        }
        Ok(())
    }
}

/// The model input for producing one response.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnContext {
    pub image_id: String,
    pub responder_style: String,
    pub history: Vec<String>,
    pub turn_index: usize,
}

impl TurnContext {
    pub fn new(image_id: impl Into<String>, style: impl Into<String>, history: Vec<String>) -> Self {
        let turn_index = history.len() + 1;
        TurnContext { image_id: image_id.into(), responder_style: style.into(), history, turn_index }
    }
}

/// A context paired with the response that followed it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnSample {
    pub id: String,
    pub context: TurnContext,
    pub gold: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LineError {
    pub line: usize,
    pub message: String,
}

#[derive(Clone, Debug, Default)]
pub struct LoadReport {
    pub examples: Vec<DialogueExample>,
    pub errors: Vec<LineError>,
}

/// Parses dataset JSONL. Bad lines are collected with their 1-based line
/// numbers; loading continues past them.
pub fn parse_dataset(text: &str, catalog: &StyleCatalog) -> LoadReport {
    let mut report = LoadReport::default();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<DialogueExample>(line)
            .map_err(|e| e.to_string())
            .and_then(|ex| ex.validate(catalog).map(|_| ex).map_err(|e| e.to_string()));
        match parsed {
            Ok(ex) => report.examples.push(ex),
            Err(message) => report.errors.push(LineError { line: i + 1, message }),
        }
    }
    report
}

pub fn load_dataset(path: &Path, catalog: &StyleCatalog) -> Result<LoadReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_dataset(&text, catalog))
}

pub fn write_dataset(path: &Path, examples: &[DialogueExample]) -> Result<()> {
    let mut out = String::new();
    for ex in examples {
        out.push_str(&serde_json::to_string(ex)?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// One sample per turn: turn `t` sees the first `t - 1` utterances, and the
/// responder alternates A, B, A.
pub fn make_turn_contexts(example: &DialogueExample, example_index: usize) -> Vec<TurnSample> {
    (0..example.turns.len())
        .map(|t| {
            let style = if t % 2 == 0 { &example.style_a } else { &example.style_b };
            TurnSample {
                id: format!("ex{example_index}.t{}", t + 1),
                context: TurnContext {
                    image_id: example.image_id.clone(),
                    responder_style: style.clone(),
                    history: example.turns[..t].iter().map(|x| x.text.clone()).collect(),
                    turn_index: t + 1,
                },
                gold: example.turns[t].text.clone(),
            }
        })
        .collect()
}

pub fn all_turn_samples(examples: &[DialogueExample]) -> Vec<TurnSample> {
    examples.iter().enumerate().flat_map(|(i, ex)| make_turn_contexts(ex, i)).collect()
}

/// Distinct turn-`turn` responses in first-seen order.
pub fn build_candidate_store(examples: &[DialogueExample], turn: usize) -> Vec<String> {
    let mut seen = HashSet::new();
    examples
        .iter()
        .filter_map(|ex| ex.turns.get(turn.checked_sub(1)?))
        .filter(|t| seen.insert(t.text.clone()))
        .map(|t| t.text.clone())
        .collect()
}
