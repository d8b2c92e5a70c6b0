//! Append-only run manifests: one JSON line per command invocation in
//! `run_manifest.jsonl` of the output directory.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::hex;

pub const RUN_MANIFEST_FILE: &str = "run_manifest.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub started_unix: f64,
    pub finished_unix: f64,
    /// Content digests of the inputs, keyed by role.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub summary: serde_json::Value,
}

impl RunManifest {
    pub fn start(command: &str, config_hash: String, seed: u64) -> Self {
        RunManifest {
            command: command.to_string(),
            config_hash,
            seed,
            started_unix: now(),
            finished_unix: 0.0,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            summary: serde_json::Value::Null,
        }
    }

    /// Stamps the finish time and appends the record to `dir`.
    pub fn finish(mut self, dir: &Path) -> Result<Self> {
        self.finished_unix = now();
        let path = dir.join(RUN_MANIFEST_FILE);
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .with_context(|| format!("opening {}", path.display()))?;
        writeln!(f, "{}", serde_json::to_string(&self)?)?;
        Ok(self)
    }
}

pub fn read_run_manifests(dir: &Path) -> Result<Vec<RunManifest>> {
    let path = dir.join(RUN_MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Into::into))
        .collect()
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

/// Digest over the sorted regular files of `dir`, skipping `exclude`.
/// Each file contributes its name and content digest.
pub fn tree_digest(dir: &Path, exclude: &[&str]) -> Result<String> {
    let mut names = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if entry.file_type()?.is_file() && !exclude.contains(&name.as_str()) {
            names.push(name);
        }
    }
    names.sort();
    let mut outer = Sha256::new();
    for name in &names {
        outer.update(name.as_bytes());
        outer.update([0u8]);
        outer.update(file_digest(&dir.join(name))?.as_bytes());
    }
    Ok(hex(&outer.finalize()))
}
