use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use log::info;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::error::ApiError;
use crate::combiner::ModalityMask;
use crate::data::{DialogueExample, FeatureStore, StyleCatalog, TurnContext};
use crate::generative::GenerativeModel;
use crate::retrieval::eval::ModelScorer;
use crate::retrieval::{rank_candidates, RetrievalModel};
use crate::metrics::RankingResult;

pub const MAX_RANK_CANDIDATES: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    #[default]
    Retrieval,
    Generative,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Speaker {
    Human,
    Model,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub speaker: Speaker,
    pub text: String,
    /// Style the model spoke in; absent for human turns.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_kind: Option<ModelKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score_or_logprob: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatSession {
    pub session_id: String,
    pub image_id: String,
    #[serde(default)]
    pub style_human: Option<String>,
    pub style_model: String,
    pub model_kind: ModelKind,
    pub transcript: Vec<TranscriptEntry>,
    pub seed: u64,
    pub config_hash: String,
}

impl ChatSession {
    pub fn history(&self) -> Vec<String> {
        self.transcript.iter().map(|e| e.text.clone()).collect()
    }
}

/// A one-shot reply request with no session.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplyRequest {
    pub image_id: String,
    pub style: String,
    #[serde(default)]
    pub history: Vec<String>,
    #[serde(default)]
    pub model_kind: ModelKind,
    #[serde(default)]
    pub n_candidates: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum SessionOp {
    Start {
        image_id: String,
        #[serde(default)]
        style_human: Option<String>,
        style_model: String,
        #[serde(default)]
        model_kind: ModelKind,
    },
    /// A human utterance followed by the model's reply. Without `text` the
    /// model speaks next (only valid when it is the model's turn).
    Say {
        session_id: String,
        #[serde(default)]
        text: Option<String>,
    },
    /// Changes the model's style or kind for subsequent replies.
    Set {
        session_id: String,
        #[serde(default)]
        style_model: Option<String>,
        #[serde(default)]
        model_kind: Option<ModelKind>,
    },
    Export { session_id: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatReply {
    pub text: String,
    pub score_or_logprob: f64,
    pub candidates_considered: usize,
    pub model_kind: ModelKind,
    pub turn: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_id: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankContext {
    pub image_id: String,
    pub style: String,
    #[serde(default)]
    pub history: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankRequest {
    pub context: RankContext,
    pub candidates: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub id: usize,
    pub text: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankResponse {
    pub ranked: Vec<ScoredCandidate>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CatalogStyle {
    pub name: String,
    pub class: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CatalogResponse {
    pub styles: Vec<CatalogStyle>,
    pub image_ids: Vec<String>,
}

/// Everything the service answers from: models, features, the per-turn
/// candidate stores and the in-memory sessions.
pub struct Engine {
    pub retrieval: Option<RetrievalModel<f32>>,
    pub generative: Option<GenerativeModel<f32>>,
    pub catalog: StyleCatalog,
    pub features: FeatureStore,
    /// Turn index (1..=3) to the distinct training responses of that turn.
    pub candidate_stores: BTreeMap<usize, Vec<String>>,
    pub seed: u64,
    pub config_hash: String,
    fingerprint: Option<String>,
    sessions: Mutex<HashMap<String, Arc<Mutex<ChatSession>>>>,
    next_session: AtomicU64,
}

impl Engine {
    pub fn new(
        retrieval: Option<RetrievalModel<f32>>,
        generative: Option<GenerativeModel<f32>>,
        catalog: StyleCatalog,
        features: FeatureStore,
        candidate_stores: BTreeMap<usize, Vec<String>>,
        seed: u64,
        config_hash: String,
    ) -> Self {
        let fingerprint = retrieval.as_ref().map(RetrievalModel::fingerprint);
        Engine {
            retrieval,
            generative,
            catalog,
            features,
            candidate_stores,
            seed,
            config_hash,
            fingerprint,
            sessions: Mutex::new(HashMap::new()),
            next_session: AtomicU64::new(1),
        }
    }

    /// Turn-partitioned stores built from training dialogues.
    pub fn stores_from(examples: &[DialogueExample]) -> BTreeMap<usize, Vec<String>> {
        (1..=3).map(|t| (t, crate::data::build_candidate_store(examples, t))).collect()
    }

    pub fn catalog(&self) -> CatalogResponse {
        CatalogResponse {
            styles: self
                .catalog
                .traits()
                .iter()
                .map(|t| CatalogStyle { name: t.name.clone(), class: t.class.as_str().to_string() })
                .collect(),
            image_ids: self.features.ids().to_vec(),
        }
    }

    fn check_context(&self, image_id: &str, style: &str) -> Result<(), ApiError> {
        if self.features.get(image_id).is_none() {
            return Err(ApiError::unknown_image(image_id));
        }
        if !self.catalog.contains(style) {
            return Err(ApiError::unknown_style(style));
        }
        Ok(())
    }

    /// Reply for a context. Retrieval ranks the store of turn
    /// `min(turn, 3)`; generation beam-decodes.
    pub fn reply(&self, req: &ReplyRequest) -> Result<ChatReply, ApiError> {
        self.check_context(&req.image_id, &req.style)?;
        if let Some(u) = req.history.iter().find(|h| h.trim().is_empty()) {
            return Err(ApiError::bad_request(format!("empty history utterance {u:?}")));
        }
        let ctx = TurnContext::new(req.image_id.clone(), req.style.clone(), req.history.clone());
        let turn = ctx.turn_index;
        match req.model_kind {
            ModelKind::Retrieval => {
                let model = self.retrieval.as_ref().ok_or_else(|| ApiError::not_loaded("retrieval"))?;
                let store = self
                    .candidate_stores
                    .get(&turn.min(3))
                    .filter(|s| !s.is_empty())
                    .ok_or_else(|| ApiError::not_loaded("candidate store"))?;
                let pool: Vec<&str> = match req.n_candidates {
                    Some(0) => return Err(ApiError::bad_request("n_candidates must be positive")),
                    Some(n) if n < store.len() => {
                        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                        let mut ids = index::sample(&mut rng, store.len(), n).into_vec();
                        ids.sort_unstable();
                        ids.into_iter().map(|i| store[i].as_str()).collect()
                    }
                    _ => store.iter().map(String::as_str).collect(),
                };
                let fp = self.fingerprint.as_deref().unwrap_or_default();
                let scorer = ModelScorer::new_with_fingerprint(model, &self.features, fp.to_string());
                let scores = scorer.score_context(&ctx, &pool).map_err(ApiError::from)?;
                let ids: Vec<usize> = (0..pool.len()).collect();
                let ranking = RankingResult::from_scores(&ids, &scores, None).map_err(ApiError::from)?;
                let top = ranking.top();
                Ok(ChatReply {
                    text: pool[top.id].to_string(),
                    score_or_logprob: top.score,
                    candidates_considered: pool.len(),
                    model_kind: ModelKind::Retrieval,
                    turn,
                    session_id: None,
                })
            }
            ModelKind::Generative => {
                let model = self.generative.as_ref().ok_or_else(|| ApiError::not_loaded("generative"))?;
                let h = model
                    .decode(&ctx, &self.features, ModalityMask::FULL, &model.decode_options())
                    .map_err(ApiError::from)?;
                Ok(ChatReply {
                    text: model.hypothesis_text(&h).map_err(ApiError::from)?,
                    score_or_logprob: h.logprob,
                    candidates_considered: 0,
                    model_kind: ModelKind::Generative,
                    turn,
                    session_id: None,
                })
            }
        }
    }

    pub fn rank(&self, req: &RankRequest) -> Result<RankResponse, ApiError> {
        if req.candidates.is_empty() {
            return Err(ApiError::bad_request("no candidates"));
        }
        if req.candidates.len() > MAX_RANK_CANDIDATES {
            return Err(ApiError::too_many_candidates(req.candidates.len()));
        }
        let c = &req.context;
        self.check_context(&c.image_id, &c.style)?;
        let model = self.retrieval.as_ref().ok_or_else(|| ApiError::not_loaded("retrieval"))?;
        let ctx = TurnContext::new(c.image_id.clone(), c.style.clone(), c.history.clone());
        let cands: Vec<&str> = req.candidates.iter().map(String::as_str).collect();
        let r = rank_candidates(model, &self.features, &ctx, &cands, ModalityMask::FULL).map_err(ApiError::from)?;
        Ok(RankResponse {
            ranked: r
                .ranked
                .into_iter()
                .map(|x| ScoredCandidate { id: x.id, text: req.candidates[x.id].clone(), score: x.score })
                .collect(),
        })
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<ChatSession>>, ApiError> {
        self.sessions
            .lock()
            .expect("session table poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::unknown_session(id))
    }

    /// Runs one session operation. Operations on the same session are
    /// serialized by its lock.
    pub fn session_op(&self, op: SessionOp) -> Result<Value, ApiError> {
        match op {
            SessionOp::Start { image_id, style_human, style_model, model_kind } => {
                self.check_context(&image_id, &style_model)?;
                if let Some(s) = &style_human {
                    if !self.catalog.contains(s) {
                        return Err(ApiError::unknown_style(s));
                    }
                }
                let id = format!("s{}", self.next_session.fetch_add(1, Ordering::SeqCst));
                let session = ChatSession {
                    session_id: id.clone(),
                    image_id,
                    style_human,
                    style_model,
                    model_kind,
                    transcript: Vec::new(),
                    seed: self.seed,
                    config_hash: self.config_hash.clone(),
                };
                let out = serde_json::to_value(&session).map_err(|e| ApiError::internal(e.to_string()))?;
                self.sessions.lock().expect("session table poisoned").insert(id, Arc::new(Mutex::new(session)));
                Ok(out)
            }
            SessionOp::Say { session_id, text } => {
                let handle = self.session(&session_id)?;
                let mut s = handle.lock().expect("session poisoned");
                let last = s.transcript.last().map(|e| e.speaker);
                let human = match text {
                    Some(t) if !t.trim().is_empty() => {
                        if last == Some(Speaker::Human) {
                            return Err(ApiError::turn_order("waiting for the model's reply"));
                        }
                        Some(t)
                    }
                    Some(_) => return Err(ApiError::bad_request("empty utterance")),
                    None => {
                        if last == Some(Speaker::Model) {
                            return Err(ApiError::turn_order("it is the human's turn"));
                        }
                        None
                    }
                };
                let mut history = s.history();
                if let Some(t) = &human {
                    history.push(t.clone());
                }
                let mut reply = self.reply(&ReplyRequest {
                    image_id: s.image_id.clone(),
                    style: s.style_model.clone(),
                    history,
                    model_kind: s.model_kind,
                    n_candidates: None,
                })?;
                if let Some(t) = human {
                    s.transcript.push(TranscriptEntry { speaker: Speaker::Human, text: t, style: None, model_kind: None, score_or_logprob: None });
                }
                let style = s.style_model.clone();
                s.transcript.push(TranscriptEntry {
                    speaker: Speaker::Model,
                    text: reply.text.clone(),
                    style: Some(style),
                    model_kind: Some(reply.model_kind),
                    score_or_logprob: Some(reply.score_or_logprob),
                });
                reply.session_id = Some(session_id);
                serde_json::to_value(reply).map_err(|e| ApiError::internal(e.to_string()))
            }
            SessionOp::Set { session_id, style_model, model_kind } => {
                let handle = self.session(&session_id)?;
                let mut s = handle.lock().expect("session poisoned");
                if let Some(style) = style_model {
                    if !self.catalog.contains(&style) {
                        return Err(ApiError::unknown_style(&style));
                    }
                    info!("session {session_id}: model style {} -> {style}", s.style_model);
                    s.style_model = style;
                }
                if let Some(kind) = model_kind {
                    s.model_kind = kind;
                }
                serde_json::to_value(&*s).map_err(|e| ApiError::internal(e.to_string()))
            }
            SessionOp::Export { session_id } => {
                let handle = self.session(&session_id)?;
                let s = handle.lock().expect("session poisoned");
                serde_json::to_value(&*s).map_err(|e| ApiError::internal(e.to_string()))
            }
        }
    }

    /// The /api/chat dispatcher: bodies with an `op` field are session
    /// operations, anything else is a one-shot reply request.
    pub fn chat(&self, body: Value) -> Result<Value, ApiError> {
        if body.get("op").is_some() {
            let op: SessionOp = serde_json::from_value(body).map_err(|e| ApiError::bad_request(e.to_string()))?;
            self.session_op(op)
        } else {
            let req: ReplyRequest = serde_json::from_value(body).map_err(|e| ApiError::bad_request(e.to_string()))?;
            serde_json::to_value(self.reply(&req)?).map_err(|e| ApiError::internal(e.to_string()))
        }
    }
}

/// Recomputes every model turn of an exported session from the preceding
/// transcript and returns the indices whose text differs.
pub fn replay(engine: &Engine, session: &ChatSession) -> Result<Vec<usize>, ApiError> {
    let mut mismatches = Vec::new();
    for (i, e) in session.transcript.iter().enumerate() {
        if e.speaker != Speaker::Model {
            continue;
        }
        let req = ReplyRequest {
            image_id: session.image_id.clone(),
            style: e.style.clone().unwrap_or_else(|| session.style_model.clone()),
            history: session.transcript[..i].iter().map(|x| x.text.clone()).collect(),
            model_kind: e.model_kind.unwrap_or(session.model_kind),
            n_candidates: None,
        };
        if engine.reply(&req)?.text != e.text {
            mismatches.push(i);
        }
    }
    Ok(mismatches)
}
