//! Every command leaves a `run.toml` in its output directory recording
//! what produced the artifacts: the subcommand, the tool version, the
//! seed, and the fully resolved configuration. Re-issuing the command
//! with that configuration reproduces the artifacts byte for byte; the
//! timestamp is provenance only and lives nowhere else.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

pub const RUN_MANIFEST_NAME: &str = "run.toml";

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest<C: Serialize> {
    pub command: &'static str,
    pub tool_version: &'static str,
    pub created_unix: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Paths relative to the manifest's directory.
    pub artifacts: Vec<String>,
    pub config: C,
}

pub fn write_run_manifest<C: Serialize>(
    out_dir: &Path,
    command: &'static str,
    seed: Option<u64>,
    artifacts: Vec<String>,
    config: C,
) -> Result<PathBuf> {
    let manifest = RunManifest {
        command,
        tool_version: env!("CARGO_PKG_VERSION"),
        created_unix: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        seed,
        artifacts,
        config,
    };
    let path = out_dir.join(RUN_MANIFEST_NAME);
    let text = toml::to_string_pretty(&manifest).context("serializing run manifest")?;
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

/// `--out` default: a command-specific leaf under the output root
/// (`FREERUN_OUT` or `runs`).
pub fn out_dir(flag: Option<PathBuf>, default_leaf: &str) -> Result<PathBuf> {
    let dir = flag.unwrap_or_else(|| freerun_core::data::default_out_root().join(default_leaf));
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}
