//! Parameter checkpoint container.
//!
//! Layout: the 8-byte magic `ICCKPT01`, a little-endian u64 manifest
//! length, the UTF-8 JSON manifest, then each parameter's values as
//! little-endian f32 in manifest order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diff::float::Float;
use crate::diff::params::ParameterStore;
use crate::diff::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ICCKPT01";

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CheckpointManifest {
    pub params: Vec<ManifestEntry>,
    pub seed: u64,
    pub config_hash: String,
    /// Model-specific payload: architecture config, vocabulary, catalog.
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn save_checkpoint<T: Float>(
    path: &Path,
    store: &ParameterStore<T>,
    config_hash: &str,
    meta: serde_json::Value,
) -> Result<()> {
    let manifest = CheckpointManifest {
        params: store
            .iter()
            .map(|(name, t)| ManifestEntry { name: name.to_string(), shape: t.shape().to_vec() })
            .collect(),
        seed: store.seed(),
        config_hash: config_hash.to_string(),
        meta,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut buf = Vec::with_capacity(16 + json.len() + 4 * store.num_scalars());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, t) in store.iter() {
        for &x in t.data() {
            buf.extend_from_slice(&(x.to_f64_lossy() as f32).to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Float>(path: &Path) -> Result<(ParameterStore<T>, CheckpointManifest)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "missing ICCKPT01 magic"));
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + mlen).ok_or_else(|| Error::format(path, "truncated manifest"))?;
    let manifest: CheckpointManifest =
        serde_json::from_slice(body).map_err(|e| Error::format(path, format!("manifest: {e}")))?;
    let mut store = ParameterStore::new(manifest.seed);
    let mut off = 16 + mlen;
    for entry in &manifest.params {
        let n: usize = entry.shape.iter().product();
        let raw = bytes
            .get(off..off + 4 * n)
            .ok_or_else(|| Error::format(path, format!("truncated payload for {}", entry.name)))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::from_f64_lossy(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect();
        store.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?)?;
        off += 4 * n;
    }
    if off != bytes.len() {
        return Err(Error::format(path, "trailing bytes after payload"));
    }
    Ok((store, manifest))
}
