//! Run manifests: what a command read, what it wrote, and with which
//! configuration, enough to replay it bit for bit and to verify outputs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::archive::write_atomic;
use crate::digest::{json_digest, sha256_hex};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    /// Relative to the manifest's directory for outputs; as given for inputs.
    pub path: String,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path, recorded_as: impl Into<String>) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        Ok(FileDigest {
            path: recorded_as.into(),
            sha256: sha256_hex(&bytes),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub manifest_version: u32,
    pub tool_version: String,
    pub command: String,
    pub config: serde_json::Value,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    /// sha256 of this manifest with `digest` empty.
    pub digest: String,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        RunManifest {
            manifest_version: MANIFEST_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
            digest: String::new(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(FileDigest::of(path, path.display().to_string())?);
        Ok(())
    }

    /// Records `dir/rel` as an output.
    pub fn add_output(&mut self, dir: &Path, rel: &str) -> Result<()> {
        self.outputs.push(FileDigest::of(&dir.join(rel), rel)?);
        Ok(())
    }

    pub fn compute_digest(&self) -> String {
        let mut m = self.clone();
        m.digest.clear();
        json_digest(&m)
    }

    /// Seals the digest and writes `dir/manifest.json`.
    pub fn write(mut self, dir: &Path) -> Result<RunManifest> {
        self.outputs.sort_by(|a, b| a.path.cmp(&b.path));
        self.digest = self.compute_digest();
        write_atomic(&dir.join(MANIFEST_FILE), &serde_json::to_vec_pretty(&self)?)?;
        Ok(self)
    }

    pub fn read(dir: &Path) -> Result<RunManifest> {
        let p = dir.join(MANIFEST_FILE);
        let bytes = fs::read(&p).map_err(|e| Error::Data(format!("{}: {e}", p.display())))?;
        let m: RunManifest = serde_json::from_slice(&bytes)?;
        if m.manifest_version != MANIFEST_VERSION {
            return Err(Error::Format(format!("manifest version {} is not supported", m.manifest_version)));
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub manifest_digest: String,
    pub checked: Vec<String>,
    pub mismatched: Vec<String>,
    pub missing: Vec<String>,
}

impl VerifyReport {
    pub fn ok(&self) -> bool {
        self.mismatched.is_empty() && self.missing.is_empty()
    }
}

/// Re-derives every output digest and the manifest's own digest.
pub fn verify(dir: &Path) -> Result<VerifyReport> {
    let m = RunManifest::read(dir)?;
    let mut report = VerifyReport {
        manifest_digest: m.digest.clone(),
        checked: Vec::new(),
        mismatched: Vec::new(),
        missing: Vec::new(),
    };
    if m.compute_digest() != m.digest {
        report.mismatched.push(MANIFEST_FILE.into());
    }
    for o in &m.outputs {
        let p: PathBuf = dir.join(&o.path);
        match fs::read(&p) {
            Ok(bytes) if sha256_hex(&bytes) == o.sha256 => report.checked.push(o.path.clone()),
            Ok(_) => report.mismatched.push(o.path.clone()),
            Err(_) => report.missing.push(o.path.clone()),
        }
    }
    Ok(report)
}
