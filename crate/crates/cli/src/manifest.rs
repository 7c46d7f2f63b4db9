//! Reproducibility record written next to every artifact.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};
use t2f_core::{Error, Precision, Result};

/// Manifest name inside an output directory.
pub const DIR_MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, Serialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub argv: Vec<String>,
    pub precision: Precision,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<FileDigest>,
    pub artifacts: Vec<FileDigest>,
    pub duration_secs: f64,
}

/// `<artifact>.manifest.json`.
pub fn path_for(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    artifact.with_file_name(name)
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl RunManifest {
    pub fn new(argv: &[String]) -> Self {
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: argv.get(1).cloned().unwrap_or_default(),
            argv: argv.to_vec(),
            precision: Precision::from_env().unwrap_or(Precision::F32),
            config: serde_json::Value::Null,
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
            artifacts: Vec::new(),
            duration_secs: 0.0,
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(FileDigest {
            path: path.to_path_buf(),
            sha256: sha256_file(path)?,
        });
        Ok(())
    }

    pub fn add_artifact(&mut self, path: &Path) -> Result<()> {
        self.artifacts.push(FileDigest {
            path: path.to_path_buf(),
            sha256: sha256_file(path)?,
        });
        Ok(())
    }

    /// Records one digest for every file of `files` under `dir`: the hash of
    /// the concatenated `name:sha256` lines in sorted order.
    pub fn add_tree_digest(&mut self, label: &str, dir: &Path, files: &[PathBuf]) -> Result<()> {
        let mut lines = Vec::new();
        for f in files.iter().filter(|f| f.parent() == Some(dir)) {
            let name = f.file_name().unwrap_or_default().to_string_lossy().into_owned();
            lines.push(format!("{name}:{}\n", sha256_file(f)?));
        }
        lines.sort();
        self.artifacts.push(FileDigest {
            path: dir.join(format!("<{label}: {} files>", lines.len())),
            sha256: hex(&Sha256::digest(lines.concat().as_bytes())),
        });
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes") + "\n";
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
