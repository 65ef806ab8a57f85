//! Image-grounded, style-conditioned dialogue.
//!
//! Retrieval and generative Transformer models over precomputed image
//! features, a style embedding and the dialogue history, together with the
//! evaluation protocol, data formats and a small HTTP service.

pub mod combiner;
pub mod data;
pub mod diff;
pub mod encoders;
pub mod error;
pub mod generative;
pub mod harness;
pub mod metrics;
pub mod persist;
pub mod retrieval;
pub mod service;

pub use error::{Error, Result};
