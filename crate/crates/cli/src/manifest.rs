use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputFile {
    /// Relative to the manifest's directory.
    pub path: String,
    pub sha256: String,
}

/// Provenance record written next to every run's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command_line: Vec<String>,
    pub subcommand: String,
    pub seeds: Vec<u64>,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub version: String,
    pub threads: Option<usize>,
    pub wall_time_seconds: f64,
    pub outputs: Vec<OutputFile>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl RunManifest {
    pub fn new(subcommand: &str, command_line: Vec<String>, seeds: Vec<u64>, config: serde_json::Value) -> Self {
        // serde_json maps are ordered, so the serialization is canonical.
        let config_hash = sha256_hex(config.to_string().as_bytes());
        Self {
            command_line,
            subcommand: subcommand.to_string(),
            seeds,
            config,
            config_hash,
            version: env!("CARGO_PKG_VERSION").to_string(),
            threads: None,
            wall_time_seconds: 0.0,
            outputs: Vec::new(),
        }
    }

    /// Hashes each output and records it relative to `dir`.
    pub fn record_outputs(&mut self, dir: &Path, files: &[PathBuf]) -> std::io::Result<()> {
        for f in files {
            let bytes = std::fs::read(f)?;
            let rel = f.strip_prefix(dir).unwrap_or(f);
            self.outputs.push(OutputFile {
                path: rel.to_string_lossy().into_owned(),
                sha256: sha256_hex(&bytes),
            });
        }
        self.outputs.sort_by(|a, b| a.path.cmp(&b.path));
        self.outputs.dedup_by(|a, b| a.path == b.path);
        Ok(())
    }

    /// Writes `manifest.json` into `dir`, replacing any earlier one.
    pub fn write(&self, dir: &Path) -> std::io::Result<PathBuf> {
        let path = dir.join(MANIFEST_NAME);
        let json = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        std::fs::write(&path, json + "\n")?;
        Ok(path)
    }
}
