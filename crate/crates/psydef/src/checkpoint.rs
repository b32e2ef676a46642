//! Checkpoint directories.
//!
//! ```text
//! ckpt/
//!   model.bin     fusion parameters and normalization statistics
//!   encoder.bin   fine-tuned encoder parameters (trainable encoders only)
//!   config.json   FusionConfig snapshot
//!   history.json  TrainingHistory
//!   meta.json     format version, catalog fingerprint, encoder description
//! ```
//!
//! Binary files: 8-byte magic, `u32` format version, `u32` array count, then
//! per array a `u64` length and that many little-endian `f64`s, closed by the
//! SHA-256 of everything before it.

use std::fs;
use std::path::{Path, PathBuf};

use psydef_core::fusion::{FusionConfig, FusionError, FusionModel, TrainingHistory};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::io::{read_json, write_json, IoError};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"PSYDEFCK";
const DIGEST_LEN: usize = 32;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("{path}: corrupt checkpoint file ({reason})")]
    Corrupt { path: PathBuf, reason: String },
    #[error("{path}: checkpoint format version {found}, this build reads {expected}")]
    VersionMismatch {
        path: PathBuf,
        found: u32,
        expected: u32,
    },
    #[error(transparent)]
    Model(#[from] FusionError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderMeta {
    /// `stub` or `live`.
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hash_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub catalog_fingerprint: String,
    pub encoder: EncoderMeta,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: FusionModel,
    pub history: TrainingHistory,
    pub meta: CheckpointMeta,
    pub encoder_params: Option<Vec<f64>>,
}

pub fn encode_arrays(arrays: &[&[f64]]) -> Vec<u8> {
    let total: usize = arrays.iter().map(|a| 8 + 8 * a.len()).sum();
    let mut out = Vec::with_capacity(16 + total + DIGEST_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for a in arrays {
        out.extend_from_slice(&(a.len() as u64).to_le_bytes());
        for v in *a {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub fn decode_arrays(path: &Path, bytes: &[u8]) -> Result<Vec<Vec<f64>>, CheckpointError> {
    let corrupt = |reason: &str| CheckpointError::Corrupt {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 16 + DIGEST_LEN {
        return Err(corrupt("truncated header"));
    }
    if &bytes[..8] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            path: path.to_path_buf(),
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    let count = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let mut pos = 16;
    let mut arrays = Vec::with_capacity(count);
    for _ in 0..count {
        let len_bytes = body.get(pos..pos + 8).ok_or_else(|| corrupt("truncated array header"))?;
        let len = u64::from_le_bytes(len_bytes.try_into().unwrap()) as usize;
        pos += 8;
        let end = len
            .checked_mul(8)
            .and_then(|n| n.checked_add(pos))
            .filter(|&e| e <= body.len())
            .ok_or_else(|| corrupt("truncated array data"))?;
        arrays.push(
            body[pos..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        );
        pos = end;
    }
    if pos != body.len() {
        return Err(corrupt("trailing bytes"));
    }
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("checksum mismatch"));
    }
    Ok(arrays)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    fs::write(path, bytes).map_err(|source| IoError::Os {
        path: path.to_path_buf(),
        source,
    })
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, IoError> {
    fs::read(path).map_err(|source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            IoError::Missing {
                path: path.to_path_buf(),
            }
        } else {
            IoError::Os {
                path: path.to_path_buf(),
                source,
            }
        }
    })
}

pub fn save_checkpoint(dir: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    fs::create_dir_all(dir).map_err(|source| IoError::Os {
        path: dir.to_path_buf(),
        source,
    })?;
    write_bytes(
        &dir.join("model.bin"),
        &encode_arrays(&[ckpt.model.params(), ckpt.model.running_stats()]),
    )?;
    let encoder_bin = dir.join("encoder.bin");
    match &ckpt.encoder_params {
        Some(p) => write_bytes(&encoder_bin, &encode_arrays(&[p]))?,
        None if encoder_bin.exists() => fs::remove_file(&encoder_bin).map_err(|source| IoError::Os {
            path: encoder_bin.clone(),
            source,
        })?,
        None => {}
    }
    write_json(&dir.join("config.json"), ckpt.model.config())?;
    write_json(&dir.join("history.json"), &ckpt.history)?;
    write_json(&dir.join("meta.json"), &ckpt.meta)?;
    Ok(())
}

/// Load a checkpoint; a catalog fingerprint differing from `catalog_fingerprint`
/// is logged as a warning, not an error.
pub fn load_checkpoint(dir: &Path, catalog_fingerprint: Option<&str>) -> Result<Checkpoint, CheckpointError> {
    let meta: CheckpointMeta = read_json(&dir.join("meta.json"))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            path: dir.join("meta.json"),
            found: meta.format_version,
            expected: FORMAT_VERSION,
        });
    }
    if let Some(expected) = catalog_fingerprint {
        if !fingerprint_matches(&meta, expected) {
            log::warn!(
                "{}: checkpoint was trained with catalog {}, current catalog is {}",
                dir.display(),
                meta.catalog_fingerprint,
                expected
            );
        }
    }
    let config: FusionConfig = read_json(&dir.join("config.json"))?;
    let history: TrainingHistory = read_json(&dir.join("history.json"))?;
    let model_path = dir.join("model.bin");
    let mut arrays = decode_arrays(&model_path, &read_bytes(&model_path)?)?;
    if arrays.len() != 2 {
        return Err(CheckpointError::Corrupt {
            path: model_path,
            reason: format!("expected 2 arrays, found {}", arrays.len()),
        });
    }
    let running = arrays.pop().unwrap();
    let params = arrays.pop().unwrap();
    let model = FusionModel::from_parts(config, params, running)?;
    let enc_path = dir.join("encoder.bin");
    let encoder_params = if enc_path.exists() {
        let mut a = decode_arrays(&enc_path, &read_bytes(&enc_path)?)?;
        if a.len() != 1 {
            return Err(CheckpointError::Corrupt {
                path: enc_path,
                reason: format!("expected 1 array, found {}", a.len()),
            });
        }
        a.pop()
    } else {
        None
    };
    Ok(Checkpoint {
        model,
        history,
        meta,
        encoder_params,
    })
}

pub fn fingerprint_matches(meta: &CheckpointMeta, catalog_fingerprint: &str) -> bool {
    meta.catalog_fingerprint == catalog_fingerprint
}
