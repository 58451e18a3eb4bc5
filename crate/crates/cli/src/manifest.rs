//! Run manifests: one JSON-lines file per run directory with enough
//! provenance (resolved config, seed, data checksum, code version) to
//! reproduce the run bit-for-bit in single-threaded mode.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use dstf_core::Result;

use crate::config::RunConfig;

pub const MANIFEST_NAME: &str = "manifest.jsonl";

/// First line of the manifest, written before any work starts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: RunConfig,
    pub data_checksum: Option<String>,
    pub seed: u64,
    pub code_version: String,
    pub started_at: String,
}

impl RunManifest {
    pub fn new(command: impl Into<String>, config: RunConfig, data_checksum: Option<String>) -> Self {
        let seed = config.seed;
        Self {
            command: command.into(),
            config,
            data_checksum,
            seed,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            started_at: now(),
        }
    }
}

/// Second line, appended when the run ends (successfully or not).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunOutcome {
    pub finished_at: String,
    pub outcome: String,
}

/// Handle to a started manifest.
pub struct ManifestFile {
    path: PathBuf,
}

impl ManifestFile {
    /// Writes the start record atomically: serialize to a temp file in the
    /// run directory, then rename over the final name.
    pub fn start(dir: &Path, manifest: &RunManifest) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(MANIFEST_NAME);
        let tmp = dir.join(format!("{MANIFEST_NAME}.tmp"));
        let line = serde_json::to_string(manifest)?;
        std::fs::write(&tmp, format!("{line}\n"))?;
        std::fs::rename(&tmp, &path)?;
        Ok(Self { path })
    }

    /// Appends the end record; `outcome` is "ok" or an error description.
    pub fn finish(&self, outcome: &str) -> Result<()> {
        let record = RunOutcome {
            finished_at: now(),
            outcome: outcome.to_string(),
        };
        let mut file = OpenOptions::new().append(true).open(&self.path)?;
        writeln!(file, "{}", serde_json::to_string(&record)?)?;
        Ok(())
    }
}

fn now() -> String {
    chrono::Local::now().to_rfc3339()
}
