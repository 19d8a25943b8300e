//! Run provenance: the exact command line, resolved settings and SHA-256
//! hashes of every file a run read or wrote.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::noise::NoiseSpec;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactHash {
    pub path: String,
    pub sha256: String,
}

impl ArtifactHash {
    pub fn of(path: &Path) -> Result<Self> {
        Ok(ArtifactHash {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    /// Arguments after the program name, exactly as parsed.
    pub args: Vec<String>,
    /// Working directory the arguments are relative to.
    pub cwd: String,
    /// Every flag after defaults were applied.
    pub resolved: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub noise: Option<NoiseSpec>,
    pub inputs: Vec<ArtifactHash>,
    /// Outputs that must be reproduced bit for bit.
    pub outputs: Vec<ArtifactHash>,
    /// Outputs that legitimately differ between runs (timings).
    #[serde(default)]
    pub volatile_outputs: Vec<String>,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HashMismatch {
    pub path: String,
    pub expected: String,
    /// `None` when the file is missing.
    pub actual: Option<String>,
}

impl RunManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    /// Re-hashes the recorded outputs (relative to `cwd`) and lists every difference.
    pub fn verify_outputs(&self) -> Vec<HashMismatch> {
        self.outputs
            .iter()
            .filter_map(|a| {
                let p = resolve(&self.cwd, &a.path);
                let actual = sha256_file(&p).ok();
                (actual.as_deref() != Some(a.sha256.as_str())).then(|| HashMismatch {
                    path: a.path.clone(),
                    expected: a.sha256.clone(),
                    actual,
                })
            })
            .collect()
    }
}

fn resolve(cwd: &str, path: &str) -> PathBuf {
    let p = Path::new(path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        Path::new(cwd).join(p)
    }
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_bytes(&bytes))
}

/// Where the manifest of a run that wrote `output` lives: next to a file
/// output, or inside an output directory.
pub fn manifest_path_for(output: &Path) -> PathBuf {
    if output.is_dir() {
        output.join("manifest.json")
    } else {
        let mut name = output.as_os_str().to_owned();
        name.push(".manifest.json");
        PathBuf::from(name)
    }
}
