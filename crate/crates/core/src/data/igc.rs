use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::dataset::{LineError, TurnContext, TurnSample};
use crate::error::{Error, Result};

/// One Image-Grounded-Conversations record.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IgcExample {
    pub image_id: String,
    pub context: String,
    pub question: String,
    pub response: String,
}

impl IgcExample {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("image_id", &self.image_id),
            ("context", &self.context),
            ("question", &self.question),
            ("response", &self.response),
        ] {
            if v.trim().is_empty() {
                return Err(Error::contract(format!("IGC field {field} is empty")));
            }
        }
        Ok(())
    }
}

pub fn parse_igc(text: &str) -> (Vec<IgcExample>, Vec<LineError>) {
    let mut examples = Vec::new();
    let mut errors = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<IgcExample>(line)
            .map_err(|e| e.to_string())
            .and_then(|ex| ex.validate().map(|_| ex).map_err(|e| e.to_string()))
        {
            Ok(ex) => examples.push(ex),
            Err(message) => errors.push(LineError { line: i + 1, message }),
        }
    }
    (examples, errors)
}

pub fn load_igc(path: &Path) -> Result<(Vec<IgcExample>, Vec<LineError>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_igc(&text))
}

/// The context utterance and question become a two-utterance history; the
/// model answers as the third turn in the caller's chosen style.
pub fn igc_adapt(ex: &IgcExample, responder_style: &str) -> TurnContext {
    TurnContext {
        image_id: ex.image_id.clone(),
        responder_style: responder_style.to_string(),
        history: vec![ex.context.clone(), ex.question.clone()],
        turn_index: 3,
    }
}

pub fn igc_samples(examples: &[IgcExample], responder_style: &str) -> Vec<TurnSample> {
    examples
        .iter()
        .enumerate()
        .map(|(i, ex)| TurnSample {
            id: format!("igc{i}"),
            context: igc_adapt(ex, responder_style),
            gold: ex.response.clone(),
        })
        .collect()
}
