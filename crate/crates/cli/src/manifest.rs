//! Artifact manifests: enough provenance to regenerate any artifact
//! directory from scratch (merged config, seed, command) plus content hashes.
//! No timestamps, so repeated runs produce byte-identical manifests.

use crate::config::RunConfig;
use anyhow::Result;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub command: String,
    pub seed: Option<u64>,
    pub config: RunConfig,
    pub artifacts: Vec<ArtifactEntry>,
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<ArtifactEntry>) -> Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else if path.file_name().is_some_and(|n| n != "manifest.json") {
            let bytes = std::fs::read(&path)?;
            let digest = Sha256::digest(&bytes);
            out.push(ArtifactEntry {
                path: path.strip_prefix(root)?.to_string_lossy().replace('\\', "/"),
                bytes: bytes.len() as u64,
                sha256: hex::encode(digest),
            });
        }
    }
    Ok(())
}

/// Hashes everything under `dir` (except the manifest itself) and writes
/// `manifest.json`.
pub fn write_manifest(dir: &Path, command: &str, config: &RunConfig) -> Result<Manifest> {
    let mut artifacts = Vec::new();
    collect_files(dir, dir, &mut artifacts)?;
    artifacts.sort_by(|a, b| a.path.cmp(&b.path));
    let manifest = Manifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        command: command.to_string(),
        seed: config.master_seed,
        config: config.clone(),
        artifacts,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(dir.join("manifest.json"), json)?;
    Ok(manifest)
}
