//! JSON-over-HTTP access to trained models, with in-memory chat sessions.

pub mod engine;
pub mod error;
pub mod http;

pub use engine::{
    replay, CatalogResponse, ChatReply, ChatSession, Engine, ModelKind, RankRequest, RankResponse, ReplyRequest,
    SessionOp, Speaker, TranscriptEntry, MAX_RANK_CANDIDATES,
};
pub use error::{ApiError, ErrorBody};
pub use http::{router, serve};
