//! Per-stage manifests: content hashes of inputs, the stage's config
//! snapshot, and its outputs. A stage whose recorded manifest matches the
//! current inputs and whose outputs are intact is skipped.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::io::{read_json, write_json, IoError};

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> Result<String, IoError> {
    let bytes = std::fs::read(path).map_err(|source| {
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
    })?;
    Ok(sha256_hex(&bytes))
}

pub fn hash_json<T: Serialize + ?Sized>(value: &T) -> String {
    sha256_hex(&serde_json::to_vec(value).expect("in-memory values serialize"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    /// Logical input name to content hash.
    pub inputs: BTreeMap<String, String>,
    pub config: serde_json::Value,
    /// Output file name, relative to the stage directory, to content hash.
    pub outputs: BTreeMap<String, String>,
}

impl StageManifest {
    pub fn new(stage: &str, config: serde_json::Value) -> Self {
        StageManifest {
            stage: stage.to_string(),
            inputs: BTreeMap::new(),
            config,
            outputs: BTreeMap::new(),
        }
    }

    pub fn input(mut self, name: &str, hash: String) -> Self {
        self.inputs.insert(name.to_string(), hash);
        self
    }

    pub fn input_file(self, name: &str, path: &Path) -> Result<Self, IoError> {
        let h = hash_file(path)?;
        Ok(self.input(name, h))
    }

    /// Hash every listed output under `stage_dir`.
    pub fn record_outputs(&mut self, stage_dir: &Path, files: &[String]) -> Result<(), IoError> {
        for f in files {
            self.outputs.insert(f.clone(), hash_file(&stage_dir.join(f))?);
        }
        Ok(())
    }

    pub fn save(&self, stage_dir: &Path) -> Result<(), IoError> {
        write_json(&stage_dir.join(MANIFEST_FILE), self)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Freshness {
    Fresh,
    NeverRun,
    /// Human-readable reasons, e.g. `input catalog changed`.
    Stale(Vec<String>),
}

/// Compare the manifest on disk with the expected inputs and config.
pub fn check(stage_dir: &Path, expected: &StageManifest) -> Freshness {
    let path = stage_dir.join(MANIFEST_FILE);
    if !path.exists() {
        return Freshness::NeverRun;
    }
    let recorded: StageManifest = match read_json(&path) {
        Ok(m) => m,
        Err(e) => return Freshness::Stale(vec![format!("manifest unreadable: {e}")]),
    };
    let mut reasons = Vec::new();
    for (name, hash) in &expected.inputs {
        match recorded.inputs.get(name) {
            Some(h) if h == hash => {}
            Some(_) => reasons.push(format!("input {name} changed")),
            None => reasons.push(format!("input {name} is new")),
        }
    }
    for name in recorded.inputs.keys() {
        if !expected.inputs.contains_key(name) {
            reasons.push(format!("input {name} was removed"));
        }
    }
    if recorded.config != expected.config {
        reasons.push("config changed".to_string());
    }
    for (file, hash) in &recorded.outputs {
        match hash_file(&stage_dir.join(file)) {
            Ok(h) if &h == hash => {}
            Ok(_) => reasons.push(format!("output {file} was modified")),
            Err(_) => reasons.push(format!("output {file} is missing")),
        }
    }
    if reasons.is_empty() {
        Freshness::Fresh
    } else {
        Freshness::Stale(reasons)
    }
}
