//! Run manifests: every command writes one, capturing the resolved config,
//! seeds, input hashes, outputs, wall clock and diagnostic counters, so a
//! run is reproducible from its manifest alone.

use std::fs;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, Serialize)]
pub struct InputRecord {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub inputs: Vec<InputRecord>,
    pub outputs: Vec<String>,
    pub wall_clock_seconds: f64,
    pub diagnostics: serde_json::Value,
}

pub fn hash_file(path: &Path) -> Result<InputRecord, CliError> {
    let data = fs::read(path)
        .map_err(|e| CliError::Io(format!("cannot hash {}: {e}", path.display())))?;
    let digest = Sha256::digest(&data);
    let mut hex = String::with_capacity(64);
    for b in digest {
        hex.push_str(&format!("{b:02x}"));
    }
    Ok(InputRecord {
        path: path.display().to_string(),
        sha256: hex,
    })
}

pub fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<(), CliError> {
    let json = serde_json::to_string_pretty(manifest)
        .map_err(|e| CliError::Io(format!("manifest serialization: {e}")))?;
    fs::write(dir.join("manifest.json"), json)
        .map_err(|e| CliError::Io(format!("cannot write manifest: {e}")))?;
    Ok(())
}
