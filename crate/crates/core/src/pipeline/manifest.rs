//! Per-stage manifests: what configuration and inputs produced which files.
//!
//! Paths are recorded as labels relative to a named root (`out/`, `images/`,
//! `ground_truth/`, ...) so manifests do not depend on where a run lives.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub fn sha256_bytes(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_bytes(&bytes))
}

/// Hash of a configuration fragment via its canonical JSON encoding.
pub fn sha256_json<T: Serialize>(value: &T) -> String {
    sha256_bytes(&serde_json::to_vec(value).expect("config serializes"))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpstreamRef {
    pub stage: String,
    /// Hash of the upstream manifest file itself.
    pub manifest_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub tool_version: String,
    pub config_version: u32,
    pub seed: u64,
    pub config_sha256: String,
    pub upstream: Vec<UpstreamRef>,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Manifest> {
        let text = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&text)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// A file together with the label it is recorded under.
#[derive(Debug, Clone)]
pub struct Tracked {
    pub label: String,
    pub path: PathBuf,
}

pub fn hash_all(files: &[Tracked]) -> Result<Vec<FileHash>> {
    files.iter().map(|f| Ok(FileHash { path: f.label.clone(), sha256: sha256_file(&f.path)? })).collect()
}

/// Labels of recorded outputs whose file is missing or differs from its hash.
pub fn stale_outputs(manifest: &Manifest, resolve: impl Fn(&str) -> Option<PathBuf>) -> Vec<String> {
    manifest
        .outputs
        .iter()
        .filter(|o| match resolve(&o.path) {
            Some(p) => sha256_file(&p).map_or(true, |h| h != o.sha256),
            None => true,
        })
        .map(|o| o.path.clone())
        .collect()
}
