//! Per-command run manifests, written last and atomically.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Result};
use semedit::io::fingerprint_file;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRef {
    /// Relative to the run directory.
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub wall_clock_secs: f64,
    pub inputs: Vec<ArtifactRef>,
    pub outputs: Vec<ArtifactRef>,
    pub metrics: BTreeMap<String, f64>,
    pub config: RunConfig,
}

/// Collects inputs, outputs and metrics while a command runs.
pub struct Recorder {
    command: &'static str,
    root: PathBuf,
    start: Instant,
    inputs: Vec<ArtifactRef>,
    outputs: Vec<ArtifactRef>,
    metrics: BTreeMap<String, f64>,
}

impl Recorder {
    pub fn new(command: &'static str, root: &Path) -> Self {
        Recorder {
            command,
            root: root.to_path_buf(),
            start: Instant::now(),
            inputs: vec![],
            outputs: vec![],
            metrics: BTreeMap::new(),
        }
    }

    fn reference(&self, path: &Path) -> Result<ArtifactRef> {
        Ok(ArtifactRef {
            path: path.strip_prefix(&self.root).unwrap_or(path).to_path_buf(),
            sha256: fingerprint_file(path)?,
        })
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let r = self.reference(path)?;
        self.inputs.push(r);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        let r = self.reference(path)?;
        self.outputs.push(r);
        Ok(())
    }

    pub fn metric(&mut self, name: impl Into<String>, value: f64) {
        self.metrics.insert(name.into(), value);
    }

    /// Writes `manifests/<command>.toml` via a temporary file and rename, then
    /// fails if any recorded metric is not finite.
    pub fn finish(self, config: &RunConfig) -> Result<PathBuf> {
        for r in self.outputs.iter().chain(&self.inputs) {
            if !self.root.join(&r.path).exists() && !r.path.is_absolute() {
                bail!("manifest references missing file {}", r.path.display());
            }
        }
        let bad: Vec<String> = self.metrics.iter().filter(|(_, v)| !v.is_finite()).map(|(k, _)| k.clone()).collect();
        let manifest = RunManifest {
            command: self.command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            wall_clock_secs: self.start.elapsed().as_secs_f64(),
            inputs: self.inputs,
            outputs: self.outputs,
            metrics: self.metrics,
            config: config.clone(),
        };
        let dir = self.root.join("manifests");
        fs::create_dir_all(&dir)?;
        let path = dir.join(format!("{}.toml", self.command));
        let tmp = dir.join(format!(".{}.toml.tmp", self.command));
        fs::write(&tmp, toml::to_string(&manifest)?)?;
        fs::rename(&tmp, &path)?;
        if !bad.is_empty() {
            bail!("non-finite metrics: {}", bad.join(", "));
        }
        Ok(path)
    }
}
