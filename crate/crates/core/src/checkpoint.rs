//! Checkpoints: a JSON manifest plus one blob of little-endian `f64`s.
//!
//! A checkpoint is a directory holding `manifest.json` and `params.bin`.
//! The manifest lists every tensor in store order with its byte offset into
//! the blob, along with the model configuration needed to rebuild the
//! architecture.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tensor};
use crate::config::ModelConfig;
use crate::error::{MeowError, Result};
use crate::model::MeowModel;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.bin";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub state_dim: usize,
    pub action_dim: usize,
    pub model: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

/// Serializes to `(manifest text, blob bytes)`.
pub fn encode(model: &MeowModel, params: &ParamStore) -> Result<(String, Vec<u8>)> {
    let mut blob = Vec::with_capacity(params.numel() * 8);
    let mut tensors = Vec::with_capacity(params.len());
    for id in params.ids() {
        let t = params.get(id);
        tensors.push(TensorEntry {
            name: params.name(id).to_string(),
            shape: t.shape().to_vec(),
            offset: blob.len(),
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        state_dim: model.state_dim(),
        action_dim: model.action_dim(),
        model: model.config().clone(),
        tensors,
    };
    let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| MeowError::Checkpoint(e.to_string()))?;
    text.push('\n');
    Ok((text, blob))
}

/// Rebuilds the model from the manifest and fills it from the blob. Every
/// tensor must match the architecture by name and shape, in order.
pub fn decode(manifest: &str, blob: &[u8]) -> Result<(MeowModel, ParamStore)> {
    let m: Manifest = serde_json::from_str(manifest).map_err(|e| MeowError::Checkpoint(e.to_string()))?;
    if m.format_version != FORMAT_VERSION {
        return Err(MeowError::Checkpoint(format!(
            "unsupported format version {}",
            m.format_version
        )));
    }
    m.model.validate()?;
    let (model, mut params) = MeowModel::new(m.state_dim, m.action_dim, &m.model, &mut ChaCha8Rng::seed_from_u64(0))?;
    let ids: Vec<_> = params.ids().collect();
    if ids.len() != m.tensors.len() {
        return Err(MeowError::Checkpoint(format!(
            "architecture has {} tensors, checkpoint has {}",
            ids.len(),
            m.tensors.len()
        )));
    }
    let mut expected_offset = 0;
    for (id, entry) in ids.into_iter().zip(&m.tensors) {
        let want = params.get(id).shape().to_vec();
        if params.name(id) != entry.name || want != entry.shape {
            return Err(MeowError::Checkpoint(format!(
                "tensor {:?} {:?} does not match architecture tensor {:?} {:?}",
                entry.name,
                entry.shape,
                params.name(id),
                want
            )));
        }
        if entry.offset != expected_offset {
            return Err(MeowError::Checkpoint(format!(
                "tensor {:?} has offset {}",
                entry.name, entry.offset
            )));
        }
        let n: usize = entry.shape.iter().product();
        let end = entry.offset + 8 * n;
        let bytes = blob
            .get(entry.offset..end)
            .ok_or_else(|| MeowError::Checkpoint(format!("blob too short for {:?}", entry.name)))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunks are 8 bytes")))
            .collect();
        params.set(id, Tensor::new(entry.shape.clone(), data)?)?;
        expected_offset = end;
    }
    if expected_offset != blob.len() {
        return Err(MeowError::Checkpoint(format!(
            "blob has {} trailing bytes",
            blob.len() - expected_offset
        )));
    }
    Ok((model, params))
}

pub fn save(dir: &Path, model: &MeowModel, params: &ParamStore) -> Result<()> {
    let (manifest, blob) = encode(model, params)?;
    fs::create_dir_all(dir)?;
    fs::write(dir.join(MANIFEST_FILE), manifest)?;
    fs::write(dir.join(BLOB_FILE), blob)?;
    Ok(())
}

pub fn load(dir: &Path) -> Result<(MeowModel, ParamStore)> {
    let read =
        |f: &str| fs::read(dir.join(f)).map_err(|e| MeowError::Checkpoint(format!("{}: {e}", dir.join(f).display())));
    let manifest = String::from_utf8(read(MANIFEST_FILE)?).map_err(|e| MeowError::Checkpoint(e.to_string()))?;
    decode(&manifest, &read(BLOB_FILE)?)
}
