//! Artifact output: a single-writer output directory with a guard against
//! clobbering the input corpus, plus the reproducibility manifest every
//! run writes. Nothing here records wall-clock time, so a repeated run
//! with the same inputs produces byte-identical files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use tempodyn::regressor::MODEL_FILE_VERSION;
use tempodyn::synth::SynthConfig;

/// Output directory handle. `protected` holds canonicalized input paths
/// that no artifact may overwrite.
pub struct OutDir {
    root: PathBuf,
    protected: Vec<PathBuf>,
}

impl OutDir {
    pub fn create(root: &Path, inputs: &[&Path]) -> Result<OutDir> {
        fs::create_dir_all(root)
            .with_context(|| format!("creating output directory `{}`", root.display()))?;
        let mut protected = Vec::new();
        for input in inputs {
            // Inputs exist by the time the out dir is opened, so they
            // canonicalize cleanly.
            protected.push(
                input
                    .canonicalize()
                    .with_context(|| format!("resolving input path `{}`", input.display()))?,
            );
        }
        Ok(OutDir { root: root.to_path_buf(), protected })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Writes one artifact, refusing to overwrite any input file.
    pub fn write(&self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.path(name);
        let canonical = match path.canonicalize() {
            Ok(p) => p,
            // A fresh artifact has no canonical path yet; resolve its parent.
            Err(_) => self
                .root
                .canonicalize()
                .with_context(|| format!("resolving output directory `{}`", self.root.display()))?
                .join(name),
        };
        if self.protected.iter().any(|p| *p == canonical) {
            bail!("refusing to overwrite input file `{}`", path.display());
        }
        fs::write(&path, bytes).with_context(|| format!("writing `{}`", path.display()))?;
        println!("wrote {}", path.display());
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf> {
        let mut body = serde_json::to_vec_pretty(value).context("serializing artifact")?;
        body.push(b'\n');
        self.write(name, &body)
    }
}

/// Software versions recorded with every run.
#[derive(Debug, Clone, Serialize)]
pub struct Versions {
    pub library: &'static str,
    pub cli: &'static str,
    pub model_file: u32,
}

impl Versions {
    pub fn current() -> Versions {
        Versions {
            library: tempodyn::VERSION,
            cli: env!("CARGO_PKG_VERSION"),
            model_file: MODEL_FILE_VERSION,
        }
    }
}

/// Everything needed to reproduce a run exactly: the command, the merged
/// configuration, SHA-256 checksums of the input files, and the software
/// versions. Deliberately no timestamps.
#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub command: String,
    pub config: RunConfig,
    pub inputs: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthConfig>,
    pub versions: Versions,
}

impl Manifest {
    pub fn new(command: &str, config: &RunConfig) -> Manifest {
        Manifest {
            command: command.to_string(),
            config: config.clone(),
            inputs: BTreeMap::new(),
            synth: None,
            versions: Versions::current(),
        }
    }

    /// Records an input file under the path string the user supplied.
    pub fn add_input(&mut self, path: &Path, bytes: &[u8]) {
        self.inputs.insert(path.display().to_string(), hex::encode(Sha256::digest(bytes)));
    }
}
