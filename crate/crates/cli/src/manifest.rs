//! Run directories and their manifests.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::error::Result;

/// One asserted property of a check-type command.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Check {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub config: serde_json::Value,
    pub seed: u64,
    pub tool_version: String,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub outputs: Vec<String>,
    pub checks: Vec<Check>,
    /// `None` for commands without checks.
    pub passed: Option<bool>,
}

pub fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

/// The single writer for one run directory.
#[derive(Debug)]
pub struct RunDir {
    root: PathBuf,
    command: String,
    seed: u64,
    started_unix: f64,
    outputs: Vec<String>,
}

impl RunDir {
    /// Opens `out`, or `runs/{command}-{unix}-seed{seed}` when `out` is `None`.
    pub fn create(out: Option<&Path>, command: &str, seed: u64) -> Result<Self> {
        let started_unix = unix_now();
        let root = match out {
            Some(p) => p.to_path_buf(),
            None => PathBuf::from("runs").join(format!("{command}-{}-seed{seed}", started_unix as u64)),
        };
        std::fs::create_dir_all(&root)?;
        Ok(RunDir {
            root,
            command: command.to_string(),
            seed,
            started_unix,
            outputs: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn write(&mut self, name: &str, contents: &str) -> Result<PathBuf> {
        let path = self.root.join(name);
        std::fs::write(&path, contents)?;
        self.record(name);
        Ok(path)
    }

    /// Registers a file written by someone else under the run root.
    pub fn record(&mut self, name: &str) {
        if !self.outputs.iter().any(|o| o == name) {
            self.outputs.push(name.to_string());
        }
    }

    /// Writes `manifest.json` via a temporary file and a rename.
    pub fn finish(
        self,
        config_path: Option<&Path>,
        config: serde_json::Value,
        checks: Vec<Check>,
    ) -> Result<RunManifest> {
        let passed = (!checks.is_empty()).then(|| checks.iter().all(|c| c.passed));
        let manifest = RunManifest {
            command: self.command,
            config_path: config_path.map(Path::to_path_buf),
            config,
            seed: self.seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix: self.started_unix,
            finished_unix: unix_now(),
            outputs: self.outputs,
            checks,
            passed,
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(sdrl_core::Error::from)?;
        let tmp = self.root.join("manifest.json.tmp");
        std::fs::write(&tmp, text)?;
        std::fs::rename(&tmp, self.root.join("manifest.json"))?;
        Ok(manifest)
    }
}
