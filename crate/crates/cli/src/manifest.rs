//! Run manifests: what a command was asked to do, what it read and what it
//! wrote.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use mvstyle::metrics::list_images;
use mvstyle::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::Invocation;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub invocation: Invocation,
    /// Fully resolved configuration the command ran with.
    pub config: serde_json::Value,
    /// SHA-256 of every input file, keyed by path.
    pub inputs: BTreeMap<String, String>,
    /// Produced files, relative to the output root.
    pub artifacts: Vec<String>,
    pub versions: BTreeMap<String, String>,
    pub seed: Option<u64>,
}

impl RunManifest {
    pub fn new(invocation: Invocation, config: serde_json::Value, seed: Option<u64>) -> Self {
        let mut versions = BTreeMap::new();
        versions.insert("mvstyle".into(), env!("CARGO_PKG_VERSION").into());
        versions.insert("checkpoint_format".into(), "1".into());
        Self {
            command: invocation.name().into(),
            invocation,
            config,
            inputs: BTreeMap::new(),
            artifacts: Vec::new(),
            versions,
            seed,
        }
    }

    /// Records a file, or every image directly inside a directory.
    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        let files = if path.is_dir() { list_images(path)? } else { vec![path.to_path_buf()] };
        for f in files {
            self.inputs.insert(f.display().to_string(), file_digest(&f)?);
        }
        Ok(())
    }

    pub fn add_artifact(&mut self, root: &Path, path: &Path) {
        let rel = path.strip_prefix(root).unwrap_or(path);
        self.artifacts.push(rel.display().to_string());
    }

    /// Errors naming the first input whose contents changed since the run.
    pub fn verify_inputs(&self) -> Result<()> {
        for (path, digest) in &self.inputs {
            let now = file_digest(Path::new(path))
                .map_err(|e| Error::Config { field: "manifest.inputs".into(), message: e.to_string() })?;
            if &now != digest {
                return Err(Error::Config {
                    field: "manifest.inputs".into(),
                    message: format!("{path} changed since the recorded run"),
                });
            }
        }
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, text + "\n")?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
            _ => e.into(),
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Config {
            field: "manifest".into(),
            message: format!("{}: {e}", path.display()),
        })
    }
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
        _ => e.into(),
    })?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}
