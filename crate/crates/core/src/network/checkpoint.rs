//! Checkpoints: a JSON manifest next to a raw little-endian f64 blob.
//!
//! The blob lives beside the manifest with the same stem and a `.bin`
//! extension. Offsets in the manifest count f64 elements, not bytes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{ModelState, NetConfig, Param, ParamGroup};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("blob holds {found} bytes, manifest describes {expected}")]
    BlobLength { expected: usize, found: usize },
    #[error("blob checksum mismatch")]
    Checksum,
    #[error("layout: {0}")]
    Layout(String),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    group: ParamGroup,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    net_config: NetConfig,
    blob: String,
    blob_sha256: String,
    params: Vec<Entry>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save_checkpoint(state: &ModelState, manifest_path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let manifest_path = manifest_path.as_ref();
    let blob_path = manifest_path.with_extension("bin");
    let mut blob = Vec::with_capacity(state.param_count() * 8);
    let mut params = Vec::with_capacity(state.params.len());
    let mut offset = 0;
    for p in &state.params {
        params.push(Entry {
            name: p.name.clone(),
            group: p.group,
            shape: p.value.shape().to_vec(),
            offset,
        });
        offset += p.value.len();
        blob.extend(p.value.data().iter().flat_map(|v| v.to_le_bytes()));
    }
    let manifest = Manifest {
        format_version: CHECKPOINT_VERSION,
        net_config: state.config.clone(),
        blob: blob_path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        blob_sha256: hex_digest(&blob),
        params,
    };
    fs::write(&blob_path, &blob).map_err(io_err(&blob_path))?;
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(manifest_path, text).map_err(io_err(manifest_path))
}

pub fn load_checkpoint(manifest_path: impl AsRef<Path>) -> Result<ModelState, CheckpointError> {
    let manifest_path = manifest_path.as_ref();
    let text = fs::read_to_string(manifest_path).map_err(io_err(manifest_path))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format_version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(manifest.format_version));
    }
    let blob_path = manifest_path.with_file_name(&manifest.blob);
    let blob = fs::read(&blob_path).map_err(io_err(&blob_path))?;
    let total: usize = manifest.params.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    if blob.len() != total * 8 {
        return Err(CheckpointError::BlobLength {
            expected: total * 8,
            found: blob.len(),
        });
    }
    if hex_digest(&blob) != manifest.blob_sha256 {
        return Err(CheckpointError::Checksum);
    }
    let values: Vec<f64> = blob
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect();
    let mut params = Vec::with_capacity(manifest.params.len());
    for e in manifest.params {
        let n: usize = e.shape.iter().product();
        let data = values
            .get(e.offset..e.offset + n)
            .ok_or_else(|| CheckpointError::Layout(format!("{} lies outside the blob", e.name)))?
            .to_vec();
        let value = Tensor::new(e.shape, data).map_err(|err| CheckpointError::Layout(err.to_string()))?;
        params.push(Param {
            name: e.name,
            group: e.group,
            value,
        });
    }
    let state = ModelState {
        config: manifest.net_config,
        params,
    };
    state.check_layout().map_err(CheckpointError::Layout)?;
    Ok(state)
}
