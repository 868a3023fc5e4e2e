//! Run manifest: config echo, checksums of every output, wall time.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use uniedit_core::io::atomic_write;

use crate::config::RunConfig;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const NORMALIZATION: &str = "pixels map to [-1, 1] as v / 127.5 - 1; frames are written clipped and rounded back to 8 bits";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config_sha256: String,
    pub config: serde_json::Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_sha256: Option<String>,
    pub normalization: String,
    /// Output path relative to the output directory -> SHA-256 of its bytes.
    pub outputs: BTreeMap<String, String>,
    pub stats: BTreeMap<String, serde_json::Value>,
    pub wall_time_s: f64,
}

pub fn file_sha256(path: &Path) -> anyhow::Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl Manifest {
    pub fn new(command: &str, cfg: &RunConfig) -> Self {
        Self {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed: cfg.seed,
            config_sha256: cfg.checksum(),
            config: serde_json::to_value(cfg).expect("config serializes"),
            model_sha256: None,
            normalization: NORMALIZATION.into(),
            outputs: BTreeMap::new(),
            stats: BTreeMap::new(),
            wall_time_s: 0.0,
        }
    }

    /// Records `path`, which must lie under `root`.
    pub fn record(&mut self, root: &Path, path: &Path) -> anyhow::Result<()> {
        let rel = path.strip_prefix(root).unwrap_or(path);
        let key = rel.to_string_lossy().replace('\\', "/");
        self.outputs.insert(key, file_sha256(path)?);
        Ok(())
    }

    /// Records every file below `dir`.
    pub fn record_dir(&mut self, root: &Path, dir: &Path) -> anyhow::Result<()> {
        let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<Result<_, _>>()?;
        entries.sort_by_key(|e| e.file_name());
        for e in entries {
            let p = e.path();
            if p.is_dir() {
                self.record_dir(root, &p)?;
            } else {
                self.record(root, &p)?;
            }
        }
        Ok(())
    }

    pub fn stat(&mut self, key: &str, value: impl Serialize) {
        self.stats
            .insert(key.into(), serde_json::to_value(value).expect("stat serializes"));
    }

    pub fn write(&self, dir: &Path) -> anyhow::Result<()> {
        atomic_write(&dir.join(MANIFEST_FILE), &serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> anyhow::Result<Self> {
        let bytes = std::fs::read(dir.join(MANIFEST_FILE))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}
