use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::write_atomic;
use crate::error::{Error, Result};
use crate::trainer::{ExperimentConfig, RunStatus};

pub const MANIFEST_FORMAT: &str = "vmt-manifest/1";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub name: String,
    pub bytes: u64,
    pub sha256: String,
}

/// Self-description of a run directory, written last.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub version: String,
    /// Subcommand and arguments that produced the directory.
    pub command: Vec<String>,
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub status: RunStatus,
    pub error: Option<String>,
    pub files: Vec<FileEntry>,
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn file_entry(dir: &Path, name: &str) -> Result<FileEntry> {
    let path = dir.join(name);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(FileEntry {
        name: name.to_string(),
        bytes: bytes.len() as u64,
        sha256: Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect(),
    })
}

impl RunManifest {
    pub fn new(command: Vec<String>, config: &ExperimentConfig, started_unix: u64) -> Self {
        RunManifest {
            format: MANIFEST_FORMAT.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command,
            config: config.clone(),
            config_hash: config.hash(),
            started_unix,
            finished_unix: started_unix,
            status: RunStatus::Failed,
            error: None,
            files: Vec::new(),
        }
    }

    /// Inventories `files` inside `dir`, stamps the end time and writes
    /// `manifest.json` atomically.
    pub fn finish(mut self, dir: &Path, status: RunStatus, error: Option<String>, files: &[String]) -> Result<Self> {
        self.status = status;
        self.error = error;
        self.finished_unix = unix_now();
        self.files = files.iter().map(|f| file_entry(dir, f)).collect::<Result<_>>()?;
        let json = serde_json::to_string_pretty(&self).map_err(|e| Error::Config(e.to_string()))?;
        write_atomic(&dir.join(MANIFEST_FILE), json.as_bytes())?;
        Ok(self)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path,
            message: e.to_string(),
        })
    }
}
