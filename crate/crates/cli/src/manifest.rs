//! Run manifest: what was run, with which inputs, and what it produced.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::report::{write_json, SCHEMA_VERSION};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub command: String,
    /// SHA-256 over the resolved configuration and input files.
    pub config_digest: String,
    pub master_seed: Option<u64>,
    /// Artifact paths relative to the output directory, in write order.
    pub artifacts: Vec<String>,
    /// Wall-clock seconds per stage.
    pub timings: BTreeMap<String, f64>,
    pub library_version: String,
}

impl RunManifest {
    pub fn new(command: &str, config_digest: String, master_seed: Option<u64>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            command: command.to_string(),
            config_digest,
            master_seed,
            artifacts: Vec::new(),
            timings: BTreeMap::new(),
            library_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn add_artifact(&mut self, out_dir: &Path, path: &Path) {
        let rel = path.strip_prefix(out_dir).unwrap_or(path);
        self.artifacts.push(rel.display().to_string());
    }

    pub fn write(&self, out_dir: &Path) -> Result<()> {
        write_json(self, &out_dir.join("manifest.json"))
    }
}

/// Hex SHA-256 of length-prefixed parts, so that part boundaries matter.
pub fn digest<'a>(parts: impl IntoIterator<Item = &'a [u8]>) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}
