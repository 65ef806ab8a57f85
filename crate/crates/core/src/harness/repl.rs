use std::io::{BufRead, Write};

use log::info;
use serde_json::Value;

use crate::error::{Error, Result};
use crate::service::{ApiError, ChatSession, Engine, ModelKind, SessionOp};

/// How a chat session starts.
#[derive(Clone, Debug, PartialEq)]
pub struct ChatStart {
    pub image_id: String,
    pub style_model: String,
    pub style_human: Option<String>,
    pub model_kind: ModelKind,
}

const HELP: &str = "commands: :style NAME  :kind retrieval|generative  :pass  :show  :help  :quit";

fn api(e: ApiError) -> Error {
    Error::Contract(format!("{}: {}", e.code, e.message))
}

fn io(e: std::io::Error) -> Error {
    Error::Io { path: "<terminal>".into(), source: e }
}

/// Reads utterances and commands line by line until `:quit` or end of
/// input, and returns the exported session.
pub fn run_repl<R: BufRead, W: Write>(engine: &Engine, start: &ChatStart, input: R, mut out: W) -> Result<ChatSession> {
    let started = engine
        .session_op(SessionOp::Start {
            image_id: start.image_id.clone(),
            style_human: start.style_human.clone(),
            style_model: start.style_model.clone(),
            model_kind: start.model_kind,
        })
        .map_err(api)?;
    let session_id = started["session_id"].as_str().expect("start returns a session id").to_string();
    writeln!(out, "image {} | model style {} | {HELP}", start.image_id, start.style_model).map_err(io)?;
    for line in input.lines() {
        let line = line.map_err(io)?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let op = match line.split_once(' ').unwrap_or((line, "")) {
            (":quit", _) => break,
            (":help", _) => {
                writeln!(out, "{HELP}").map_err(io)?;
                continue;
            }
            (":show", _) => {
                let s = engine.session_op(SessionOp::Export { session_id: session_id.clone() }).map_err(api)?;
                writeln!(out, "{}", serde_json::to_string_pretty(&s)?).map_err(io)?;
                continue;
            }
            (":style", name) => SessionOp::Set { session_id: session_id.clone(), style_model: Some(name.trim().to_string()), model_kind: None },
            (":kind", k) => {
                let kind = match k.trim() {
                    "retrieval" => ModelKind::Retrieval,
                    "generative" => ModelKind::Generative,
                    other => {
                        writeln!(out, "error: unknown model kind {other:?}").map_err(io)?;
                        continue;
                    }
                };
                SessionOp::Set { session_id: session_id.clone(), style_model: None, model_kind: Some(kind) }
            }
            (":pass", _) => SessionOp::Say { session_id: session_id.clone(), text: None },
            (cmd, _) if cmd.starts_with(':') => {
                writeln!(out, "error: unknown command {cmd}; {HELP}").map_err(io)?;
                continue;
            }
            _ => SessionOp::Say { session_id: session_id.clone(), text: Some(line.to_string()) },
        };
        let is_set = matches!(op, SessionOp::Set { .. });
        match engine.session_op(op) {
            Ok(v) if is_set => {
                info!("session {session_id}: now {} / {}", v["style_model"], v["model_kind"]);
                writeln!(out, "[model style {} | {}]", text(&v["style_model"]), text(&v["model_kind"])).map_err(io)?;
            }
            Ok(v) => writeln!(out, "model: {}", text(&v["text"])).map_err(io)?,
            Err(e) => writeln!(out, "error: {}: {}", e.code, e.message).map_err(io)?,
        }
    }
    let exported = engine.session_op(SessionOp::Export { session_id }).map_err(api)?;
    Ok(serde_json::from_value(exported)?)
}

fn text(v: &Value) -> &str {
    v.as_str().unwrap_or_default()
}
