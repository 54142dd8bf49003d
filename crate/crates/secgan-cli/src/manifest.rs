//! Run manifest: written before training starts, immutable afterwards.

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub code_version: String,
    pub seed: u64,
    pub created_unix: u64,
    pub data_root: String,
    pub parser_path: String,
    pub overrides: Vec<String>,
}

impl RunManifest {
    pub fn path(run_dir: &Path) -> std::path::PathBuf {
        run_dir.join("manifest.json")
    }

    pub fn write_new(&self, run_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(run_dir)?;
        let path = Self::path(run_dir);
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(run_dir: &Path) -> Result<Self> {
        let path = Self::path(run_dir);
        let json = std::fs::read_to_string(&path)
            .with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_str(&json)?)
    }

    /// Idempotent creation: a fresh directory gets a manifest; an existing
    /// one must match the configuration being trained.
    pub fn ensure(run_dir: &Path, fresh: Self) -> Result<Self> {
        if Self::path(run_dir).is_file() {
            let existing = Self::load(run_dir)?;
            if existing.config_hash != fresh.config_hash {
                bail!(
                    "run directory {} belongs to config {} (attempted {})",
                    run_dir.display(),
                    &existing.config_hash[..12.min(existing.config_hash.len())],
                    &fresh.config_hash[..12]
                );
            }
            Ok(existing)
        } else {
            fresh.write_new(run_dir)?;
            Ok(fresh)
        }
    }
}
