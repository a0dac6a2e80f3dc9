//! The artifact manifest: every file a later command reads is listed here
//! with a checksum by the command that wrote it. Lookups of unlisted names
//! fail fast; checksum mismatches mean the artifact was modified after it
//! was recorded.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Artifact {
    pub name: String,
    pub kind: String,
    /// Path relative to the output directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct Manifest {
    pub version: u32,
    pub artifacts: Vec<Artifact>,
}

fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(CliError::io(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl Manifest {
    pub fn load_or_default(dir: &Path) -> CliResult<Self> {
        let path = dir.join(MANIFEST_NAME);
        if !path.exists() {
            return Ok(Self { version: 1, artifacts: Vec::new() });
        }
        let text = fs::read_to_string(&path).map_err(CliError::io(&path))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("manifest {} is corrupt: {e}", path.display())))
    }

    pub fn load(dir: &Path) -> CliResult<Self> {
        let path = dir.join(MANIFEST_NAME);
        if !path.exists() {
            return Err(CliError::MissingArtifact(format!(
                "no manifest at {}; run `isalt gen-data` first",
                path.display()
            )));
        }
        Self::load_or_default(dir)
    }

    /// Records (or replaces) an artifact that was just written to
    /// `dir/relative`.
    pub fn record(&mut self, dir: &Path, name: &str, kind: &str, relative: &str) -> CliResult<()> {
        let sha256 = sha256_file(&dir.join(relative))?;
        self.artifacts.retain(|a| a.name != name);
        self.artifacts.push(Artifact {
            name: name.to_string(),
            kind: kind.to_string(),
            path: relative.to_string(),
            sha256,
        });
        self.artifacts.sort_by(|a, b| a.name.cmp(&b.name));
        Ok(())
    }

    /// Resolves a recorded artifact to its absolute path, verifying the
    /// checksum.
    pub fn resolve(&self, dir: &Path, name: &str) -> CliResult<PathBuf> {
        let artifact = self.artifacts.iter().find(|a| a.name == name).ok_or_else(|| {
            CliError::MissingArtifact(format!(
                "`{name}` is not in the manifest; run the producing command first"
            ))
        })?;
        let path = dir.join(&artifact.path);
        if !path.exists() {
            return Err(CliError::MissingArtifact(format!(
                "`{name}` is listed in the manifest but {} does not exist",
                path.display()
            )));
        }
        let actual = sha256_file(&path)?;
        if actual != artifact.sha256 {
            return Err(CliError::ChecksumMismatch {
                path,
                expected: artifact.sha256.clone(),
                actual,
            });
        }
        Ok(path)
    }

    pub fn names_with_kind(&self, kind: &str) -> Vec<&str> {
        self.artifacts
            .iter()
            .filter(|a| a.kind == kind)
            .map(|a| a.name.as_str())
            .collect()
    }

    /// Writes the manifest atomically (temp file + rename), so a partially
    /// written manifest is never observed.
    pub fn write(&self, dir: &Path) -> CliResult<()> {
        let path = dir.join(MANIFEST_NAME);
        let tmp = dir.join(format!("{MANIFEST_NAME}.tmp"));
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| CliError::Config(format!("manifest serialization failed: {e}")))?;
        text.push('\n');
        fs::write(&tmp, text).map_err(CliError::io(&tmp))?;
        fs::rename(&tmp, &path).map_err(CliError::io(&path))?;
        Ok(())
    }
}
