//! Line-delimited JSON files and the catalog documents.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use psydef_core::augmentor::{DmrsCatalog, SupplementaryDefinitions};
use psydef_core::corpus::{CorpusError, Dialogue};
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: file not found")]
    Missing { path: PathBuf },
    #[error("{path}:{line}: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: {source}")]
    Invalid {
        path: PathBuf,
        line: usize,
        source: CorpusError,
    },
    #[error("{path}: {message}")]
    Document { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Os {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl IoError {
    fn os(path: &Path, source: std::io::Error) -> Self {
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
    }
}

fn open(path: &Path) -> Result<File, IoError> {
    File::open(path).map_err(|e| IoError::os(path, e))
}

/// Parse every non-blank line; errors carry 1-based line numbers.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, IoError> {
    Ok(read_jsonl_numbered(path)?.into_iter().map(|(_, v)| v).collect())
}

fn read_jsonl_numbered<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>, IoError> {
    let reader = BufReader::new(open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| IoError::os(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| IoError::Malformed {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push((i + 1, value));
    }
    Ok(out)
}

/// Write one JSON document per line, creating parent directories.
pub fn write_jsonl<'a, T: Serialize + 'a>(
    path: &Path,
    items: impl IntoIterator<Item = &'a T>,
) -> Result<(), IoError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| IoError::os(parent, e))?;
    }
    let file = File::create(path).map_err(|e| IoError::os(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(|e| IoError::Document {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        w.write_all(b"\n").map_err(|e| IoError::os(path, e))?;
    }
    w.flush().map_err(|e| IoError::os(path, e))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), IoError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| IoError::os(parent, e))?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|e| IoError::Document {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| IoError::os(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let text = fs::read_to_string(path).map_err(|e| IoError::os(path, e))?;
    serde_json::from_str(&text).map_err(|e| IoError::Document {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Load and validate a dialogue corpus, one dialogue per line.
pub fn load_corpus(path: &Path) -> Result<Vec<Dialogue>, IoError> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (line, d) in read_jsonl_numbered::<Dialogue>(path)? {
        let invalid = |source| IoError::Invalid {
            path: path.to_path_buf(),
            line,
            source,
        };
        d.validate().map_err(invalid)?;
        if !seen.insert(d.id.clone()) {
            return Err(invalid(CorpusError::DuplicateId(d.id)));
        }
        out.push(d);
    }
    Ok(out)
}

pub fn save_corpus(path: &Path, dialogues: &[Dialogue]) -> Result<(), IoError> {
    write_jsonl(path, dialogues)
}

pub fn load_catalog(path: &Path) -> Result<DmrsCatalog, IoError> {
    read_json(path)
}

pub fn load_supplementary(path: &Path) -> Result<SupplementaryDefinitions, IoError> {
    let sup: SupplementaryDefinitions = read_json(path)?;
    sup.validate().map_err(|e| IoError::Document {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(sup)
}
