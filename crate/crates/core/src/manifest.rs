//! Run manifests: a JSON record of the resolved configuration, the seeds in
//! play, and a content hash of every input and output artifact, so a run can
//! be audited and re-run for bit-identical outputs.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ArtifactRef {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub created_unix: u64,
    pub config: BTreeMap<String, String>,
    pub seeds: Vec<u64>,
    pub inputs: Vec<ArtifactRef>,
    pub outputs: Vec<ArtifactRef>,
}

pub fn hash_file(path: &Path) -> io::Result<String> {
    let bytes = fs::read(path)?;
    Ok(hash_bytes(&bytes))
}

pub fn hash_bytes(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

impl RunManifest {
    pub fn new(command: &str, config: BTreeMap<String, String>, seeds: Vec<u64>) -> Self {
        RunManifest {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            created_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            config,
            seeds,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn add_input(&mut self, base: &Path, path: &Path) -> io::Result<()> {
        self.inputs.push(artifact(base, path)?);
        Ok(())
    }

    pub fn add_output(&mut self, base: &Path, path: &Path) -> io::Result<()> {
        self.outputs.push(artifact(base, path)?);
        Ok(())
    }

    pub fn write(&self, path: &Path) -> io::Result<()> {
        fs::write(path, serde_json::to_string_pretty(self).expect("manifest serialize"))
    }
}

fn artifact(base: &Path, path: &Path) -> io::Result<ArtifactRef> {
    let rel = path.strip_prefix(base).unwrap_or(path);
    Ok(ArtifactRef { path: rel.to_string_lossy().into_owned(), sha256: hash_file(path)? })
}
