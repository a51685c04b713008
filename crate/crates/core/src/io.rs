//! Line-delimited JSON files and content hashing.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: format!("line {}: {e}", n + 1),
        })?);
    }
    Ok(out)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Hash of the canonical JSON encoding of a value.
pub fn content_hash<T: Serialize>(value: &T) -> Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(value)?))
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Lineage record written next to every stage's artifacts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub config_hash: String,
    /// Upstream stage name → that stage's manifest hash.
    pub inputs: BTreeMap<String, String>,
    /// Artifact file name → sha256 of its bytes.
    pub files: BTreeMap<String, String>,
    /// Stage-specific payload.
    #[serde(default)]
    pub meta: serde_json::Value,
}

impl Manifest {
    pub fn new(stage: &str, config_hash: &str) -> Self {
        Manifest {
            stage: stage.into(),
            config_hash: config_hash.into(),
            inputs: BTreeMap::new(),
            files: BTreeMap::new(),
            meta: serde_json::Value::Null,
        }
    }

    /// Records the hashes of `names` inside `dir`, then writes the manifest.
    pub fn seal(mut self, dir: &Path, names: &[&str]) -> Result<Manifest> {
        for name in names {
            self.files.insert(name.to_string(), file_sha256(&dir.join(name))?);
        }
        write_json(&dir.join(MANIFEST_FILE), &self)?;
        Ok(self)
    }

    pub fn hash(&self) -> Result<String> {
        content_hash(self)
    }

    /// Reads `dir/manifest.json` and checks every listed file against its hash.
    pub fn load_verified(dir: &Path, stage: &str) -> Result<Manifest> {
        let m: Manifest = read_json(&dir.join(MANIFEST_FILE))?;
        if m.stage != stage {
            return Err(Error::Format {
                path: dir.join(MANIFEST_FILE),
                message: format!("expected a {stage} manifest, found {}", m.stage),
            });
        }
        for (name, expected) in &m.files {
            let found = file_sha256(&dir.join(name))?;
            if &found != expected {
                return Err(Error::HashMismatch {
                    what: dir.join(name).display().to_string(),
                    expected: expected.clone(),
                    found,
                });
            }
        }
        Ok(m)
    }

    pub fn require_config(&self, config_hash: &str) -> Result<()> {
        if self.config_hash != config_hash {
            return Err(Error::HashMismatch {
                what: format!("config of the {} stage", self.stage),
                expected: config_hash.into(),
                found: self.config_hash.clone(),
            });
        }
        Ok(())
    }
}
