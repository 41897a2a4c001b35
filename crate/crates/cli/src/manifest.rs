//! `run_manifest.json`: what produced a run directory and the hashes of
//! its inputs and outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use mh3d_core::synthdata::sha256;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub command_line: Vec<String>,
    pub seed: Option<u64>,
    /// SHA-256 of the effective config JSON.
    pub config_hash: Option<String>,
    pub dataset_hash: Option<String>,
    /// Input files and their SHA-256, by path as given.
    pub inputs: BTreeMap<String, String>,
    /// Output files and their SHA-256, relative to the run directory.
    pub artifacts: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        Self {
            tool: "mh3d".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            command_line: std::env::args().collect(),
            seed: None,
            config_hash: None,
            dataset_hash: None,
            inputs: BTreeMap::new(),
            artifacts: BTreeMap::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        let bytes = fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        self.inputs.insert(path.display().to_string(), sha256(&bytes));
        Ok(())
    }

    pub fn artifact(&mut self, dir: &Path, rel: &str) -> Result<(), CliError> {
        let bytes = fs::read(dir.join(rel))?;
        self.artifacts.insert(rel.to_string(), sha256(&bytes));
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        fs::write(dir.join(RUN_MANIFEST), json)?;
        Ok(())
    }
}
