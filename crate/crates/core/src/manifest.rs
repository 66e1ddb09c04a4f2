//! Run manifests: the resolved configuration, seed and content hashes of
//! every input and output. No timestamps, so identical runs write identical
//! manifests.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("manifest i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest json: {0}")]
    Json(#[from] serde_json::Error),
}

/// SHA-256 of `"blob <len>\0" ‖ bytes`, hex encoded.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Resolved configuration, seed override applied.
    pub config: serde_json::Value,
    pub config_hash: String,
    pub seed: u64,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(command: &str, config: serde_json::Value, seed: u64) -> Self {
        let config_hash = blob_hash(canonical_json(&config).as_bytes());
        Self {
            tool: "covertmark".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config,
            config_hash,
            seed,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn add_input(&mut self, name: &str, bytes: &[u8]) {
        self.inputs.insert(name.into(), blob_hash(bytes));
    }

    pub fn add_output(&mut self, name: &str, bytes: &[u8]) {
        self.outputs.insert(name.into(), blob_hash(bytes));
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn write(&self, dir: &Path) -> Result<(), ManifestError> {
        std::fs::write(dir.join(MANIFEST_FILE), self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ManifestError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Compact JSON with object keys sorted.
pub fn canonical_json(v: &serde_json::Value) -> String {
    // serde_json maps are ordered by key unless `preserve_order` is on
    serde_json::to_string(v).expect("value serializes")
}
