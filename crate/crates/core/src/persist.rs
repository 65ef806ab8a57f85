//! Saving and loading trained models with their vocabulary and catalog.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{StyleCatalog, Vocabulary};
use crate::diff::{load_checkpoint, save_checkpoint, CheckpointManifest, Float};
use crate::error::{Error, Result};
use crate::generative::{GenConfig, GenerativeModel};
use crate::retrieval::{RetrievalConfig, RetrievalModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelMeta {
    Retrieval { config: RetrievalConfig, vocab: Vocabulary, catalog: StyleCatalog },
    Generative { config: GenConfig, vocab: Vocabulary, catalog: StyleCatalog },
}

/// sha256 of the compact JSON rendering (object keys sorted).
pub fn config_hash(config: &serde_json::Value) -> String {
    hex::encode(Sha256::digest(config.to_string().as_bytes()))
}

pub fn save_retrieval<T: Float>(path: &Path, model: &RetrievalModel<T>, hash: &str) -> Result<()> {
    let meta = ModelMeta::Retrieval { config: model.config.clone(), vocab: model.vocab.clone(), catalog: model.catalog.clone() };
    save_checkpoint(path, &model.params, hash, serde_json::to_value(meta)?)
}

pub fn save_generative<T: Float>(path: &Path, model: &GenerativeModel<T>, hash: &str) -> Result<()> {
    let meta = ModelMeta::Generative { config: model.config.clone(), vocab: model.vocab.clone(), catalog: model.catalog.clone() };
    save_checkpoint(path, &model.params, hash, serde_json::to_value(meta)?)
}

fn meta_of(path: &Path, manifest: &CheckpointManifest) -> Result<ModelMeta> {
    serde_json::from_value(manifest.meta.clone()).map_err(|e| Error::format(path, format!("model metadata: {e}")))
}

pub enum LoadedModel<T> {
    Retrieval(RetrievalModel<T>),
    Generative(GenerativeModel<T>),
}

/// Loads either kind of model, as recorded in the checkpoint.
pub fn load_model<T: Float>(path: &Path) -> Result<(LoadedModel<T>, CheckpointManifest)> {
    let (params, manifest) = load_checkpoint::<T>(path)?;
    let model = match meta_of(path, &manifest)? {
        ModelMeta::Retrieval { config, vocab, catalog } => {
            LoadedModel::Retrieval(RetrievalModel::from_parts(config, params, vocab, catalog)?)
        }
        ModelMeta::Generative { config, vocab, catalog } => {
            LoadedModel::Generative(GenerativeModel::from_parts(config, params, vocab, catalog)?)
        }
    };
    Ok((model, manifest))
}

pub fn load_retrieval<T: Float>(path: &Path) -> Result<(RetrievalModel<T>, CheckpointManifest)> {
    match load_model(path)? {
        (LoadedModel::Retrieval(m), manifest) => Ok((m, manifest)),
        _ => Err(Error::format(path, "expected a retrieval checkpoint, found a generative one")),
    }
}

pub fn load_generative<T: Float>(path: &Path) -> Result<(GenerativeModel<T>, CheckpointManifest)> {
    match load_model(path)? {
        (LoadedModel::Generative(m), manifest) => Ok((m, manifest)),
        _ => Err(Error::format(path, "expected a generative checkpoint, found a retrieval one")),
    }
}
