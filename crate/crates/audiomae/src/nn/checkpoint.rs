//! Checkpoint format: a directory holding
//!   - `manifest.json` — sorted map of parameter name → {shape, dtype, offset}
//!   - `params.blob`   — raw little-endian f32 values, concatenated in
//!                        manifest (i.e. name-sorted) order
//!   - `config.json`   — caller-supplied sidecar (model config, normalizer
//!                        statistics, …)
//!
//! Saving the same parameters twice produces byte-identical files, which the
//! determinism tests rely on.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use thiserror::Error;

use super::adam::ParamMap;
use super::tensor::Tensor;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

#[derive(Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct ManifestEntry {
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into `params.blob`.
    pub offset: u64,
}

pub type Manifest = BTreeMap<String, ManifestEntry>;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.blob";
pub const CONFIG_FILE: &str = "config.json";

/// Write a checkpoint directory (created if missing).
pub fn save<S: Serialize>(
    dir: &Path,
    params: &ParamMap<f32>,
    sidecar: &S,
) -> Result<(), CheckpointError> {
    fs::create_dir_all(dir)?;
    let mut manifest = Manifest::new();
    let mut blob: Vec<u8> = Vec::new();
    for (name, tensor) in params {
        manifest.insert(
            name.clone(),
            ManifestEntry {
                shape: tensor.shape().to_vec(),
                dtype: "f32".to_string(),
                offset: blob.len() as u64,
            },
        );
        for v in tensor.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::File::create(dir.join(BLOB_FILE))?.write_all(&blob)?;
    let manifest_json = serde_json::to_vec_pretty(&manifest)?;
    fs::File::create(dir.join(MANIFEST_FILE))?.write_all(&manifest_json)?;
    let sidecar_json = serde_json::to_vec_pretty(sidecar)?;
    fs::File::create(dir.join(CONFIG_FILE))?.write_all(&sidecar_json)?;
    Ok(())
}

pub fn load_manifest(dir: &Path) -> Result<Manifest, CheckpointError> {
    let mut raw = String::new();
    fs::File::open(dir.join(MANIFEST_FILE))?.read_to_string(&mut raw)?;
    Ok(serde_json::from_str(&raw)?)
}

pub fn load_sidecar<S: DeserializeOwned>(dir: &Path) -> Result<S, CheckpointError> {
    let mut raw = String::new();
    fs::File::open(dir.join(CONFIG_FILE))?.read_to_string(&mut raw)?;
    Ok(serde_json::from_str(&raw)?)
}

/// Read parameters back; validates dtype, offsets and total blob length.
pub fn load_params(dir: &Path) -> Result<ParamMap<f32>, CheckpointError> {
    let manifest = load_manifest(dir)?;
    let mut blob = Vec::new();
    fs::File::open(dir.join(BLOB_FILE))?.read_to_end(&mut blob)?;
    let mut params = ParamMap::new();
    let mut expected_offset = 0u64;
    for (name, entry) in &manifest {
        if entry.dtype != "f32" {
            return Err(CheckpointError::Corrupt(format!(
                "parameter '{}' has unsupported dtype '{}'",
                name, entry.dtype
            )));
        }
        if entry.offset != expected_offset {
            return Err(CheckpointError::Corrupt(format!(
                "parameter '{}' offset {} does not follow previous entry (expected {})",
                name, entry.offset, expected_offset
            )));
        }
        let numel: usize = entry.shape.iter().product();
        let bytes = numel * 4;
        let start = entry.offset as usize;
        let end = start + bytes;
        if end > blob.len() {
            return Err(CheckpointError::Corrupt(format!(
                "parameter '{}' extends to byte {} but blob holds {}",
                name,
                end,
                blob.len()
            )));
        }
        let mut data = Vec::with_capacity(numel);
        for chunk in blob[start..end].chunks_exact(4) {
            data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
        }
        params.insert(name.clone(), Arc::new(Tensor::from_vec(&entry.shape, data)));
        expected_offset = end as u64;
    }
    if expected_offset as usize != blob.len() {
        return Err(CheckpointError::Corrupt(format!(
            "blob holds {} bytes but manifest accounts for {}",
            blob.len(),
            expected_offset
        )));
    }
    Ok(params)
}
