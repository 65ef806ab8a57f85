//! Precomputed image features.
//!
//! File layout: the 8-byte magic `IMFEAT01`, a little-endian u64 manifest
//! length, a JSON manifest `{"ids": [...], "dim": 2048, "count": n}`, then
//! `count * dim` little-endian f32 values, one row per id in manifest order.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 8] = b"IMFEAT01";
pub const IMAGE_FEATURE_DIM: usize = 2048;

/// Backbone output for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageFeatureVector {
    pub image_id: String,
    values: Vec<f32>,
}

impl ImageFeatureVector {
    pub fn new(image_id: impl Into<String>, values: Vec<f32>) -> Result<Self> {
        if values.len() != IMAGE_FEATURE_DIM {
            return Err(Error::contract(format!(
                "image features must have {IMAGE_FEATURE_DIM} entries, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image features"));
        }
        Ok(ImageFeatureVector { image_id: image_id.into(), values })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    ids: Vec<String>,
    dim: usize,
    count: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureStore {
    ids: Vec<String>,
    index: HashMap<String, usize>,
    data: Vec<f32>,
}

impl FeatureStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, feat: ImageFeatureVector) -> Result<()> {
        if self.index.contains_key(&feat.image_id) {
            return Err(Error::contract(format!("duplicate image id {:?}", feat.image_id)));
        }
        self.index.insert(feat.image_id.clone(), self.ids.len());
        self.ids.push(feat.image_id);
        self.data.extend_from_slice(&feat.values);
        Ok(())
    }

    pub fn get(&self, image_id: &str) -> Option<&[f32]> {
        let i = *self.index.get(image_id)?;
        Some(&self.data[i * IMAGE_FEATURE_DIM..(i + 1) * IMAGE_FEATURE_DIM])
    }

    pub fn require(&self, image_id: &str) -> Result<&[f32]> {
        self.get(image_id).ok_or_else(|| Error::UnknownImage(image_id.to_string()))
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = Manifest { ids: self.ids.clone(), dim: IMAGE_FEATURE_DIM, count: self.ids.len() };
        let json = serde_json::to_vec(&manifest)?;
        let mut buf = Vec::with_capacity(16 + json.len() + 4 * self.data.len());
        buf.extend_from_slice(FEATURE_MAGIC);
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != FEATURE_MAGIC {
            return Err(Error::format(origin, "missing IMFEAT01 magic"));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + mlen).ok_or_else(|| Error::format(origin, "truncated manifest"))?;
        let m: Manifest = serde_json::from_slice(body).map_err(|e| Error::format(origin, e.to_string()))?;
        if m.dim != IMAGE_FEATURE_DIM || m.count != m.ids.len() {
            return Err(Error::format(origin, format!("manifest dim={} count={} ids={}", m.dim, m.count, m.ids.len())));
        }
        let payload = &bytes[16 + mlen..];
        if payload.len() != 4 * m.count * m.dim {
            return Err(Error::format(origin, "payload size does not match manifest"));
        }
        let mut store = FeatureStore::new();
        for (i, id) in m.ids.into_iter().enumerate() {
            let row = &payload[4 * i * m.dim..4 * (i + 1) * m.dim];
            let values = row.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            store
                .insert(ImageFeatureVector::new(id, values).map_err(|e| Error::format(origin, e.to_string()))?)
                .map_err(|e| Error::format(origin, e.to_string()))?;
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
