use std::path::{Path, PathBuf};

use mocorr_core::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::Command;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Written once per run next to its outputs; `mocorr replay` re-runs the
/// recorded invocation with the recorded config.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub invocation: Command,
    /// Fully resolved config, defaults expanded.
    pub config: Value,
    pub seeds: Value,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub deterministic: bool,
    pub duration_s: f64,
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io_at(&path, e))?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path).map_err(|e| Error::io_at(path, e))?)?)
    }
}
