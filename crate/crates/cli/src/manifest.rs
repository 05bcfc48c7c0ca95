//! Run manifests: what was run, with which resolved settings, on which
//! inputs, producing which outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub subcommand: &'static str,
    /// Command line as invoked.
    pub argv: Vec<String>,
    /// Every setting after defaults and overrides were resolved.
    pub config: Value,
    pub seeds: BTreeMap<String, u64>,
    /// Content hashes of inputs (corpora, checkpoints, prediction files).
    pub inputs: BTreeMap<String, String>,
    /// SHA-256 of every file written, keyed by path relative to the
    /// manifest's directory.
    pub outputs: BTreeMap<String, String>,
    pub started_at: String,
    pub finished_at: String,
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

impl RunManifest {
    pub fn start(subcommand: &'static str, config: Value) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            subcommand,
            argv: std::env::args().collect(),
            config,
            seeds: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            started_at: now(),
            finished_at: String::new(),
        }
    }

    pub fn seed(&mut self, name: &str, seed: u64) {
        self.seeds.insert(name.to_owned(), seed);
    }

    pub fn input(&mut self, name: &str, hash: String) {
        self.inputs.insert(name.to_owned(), hash);
    }

    /// Writes `bytes` to `path` and records its hash.
    pub fn write_output(&mut self, dir: &Path, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = dir.join(name);
        std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.outputs.insert(name.to_owned(), sha256_hex(bytes));
        Ok(path)
    }

    pub fn record_output(&mut self, name: &str, hash: String) {
        self.outputs.insert(name.to_owned(), hash);
    }

    pub fn finish(mut self, path: &Path) -> Result<()> {
        self.finished_at = now();
        let mut text = serde_json::to_string_pretty(&self)?;
        text.push('\n');
        std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}
