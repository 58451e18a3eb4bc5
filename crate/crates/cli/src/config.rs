//! Run configuration: one TOML file covering the model, training, and data
//! handling, plus `--set key.path=value` overrides that win over the file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use dstf_core::data::SplitSpec;
use dstf_core::model::ModelConfig;
use dstf_core::training::TrainConfig;
use dstf_core::{Error, Result};

/// Everything a run needs beyond the dataset itself. All fields default,
/// so an empty file (or none at all) is a valid starting point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Parameter-initialization seed; batch shuffling uses `train.seed`.
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub split: SplitSpec,
    /// Mask zero readings when computing evaluation metrics.
    pub mask_zeros: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            split: SplitSpec::default(),
            mask_zeros: true,
        }
    }
}

/// Loads the config file (when given) and applies the `--set` overrides on
/// top, then deserializes the result.
pub fn load_config(path: Option<&Path>, sets: &[String]) -> Result<RunConfig> {
    let mut value: toml::Value = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::config(format!("{}: {e}", p.display())))?;
            text.parse()
                .map_err(|e| Error::config(format!("{}: {e}", p.display())))?
        }
        None => toml::Value::Table(toml::map::Map::new()),
    };
    for spec in sets {
        apply_set(&mut value, spec)?;
    }
    value
        .try_into()
        .map_err(|e| Error::config(format!("config: {e}")))
}

/// Writes `cfg` as TOML, the same shape `load_config` reads.
pub fn save_config(cfg: &RunConfig, path: &Path) -> Result<()> {
    let text = toml::to_string_pretty(cfg).map_err(|e| Error::config(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Applies one `key.path=value` override to a TOML tree, creating
/// intermediate tables as needed.
pub fn apply_set(root: &mut toml::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override {spec:?} must look like key.path=value")))?;
    let segments: Vec<&str> = path.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(Error::config(format!("override {spec:?} has an empty key segment")));
    }
    let mut cursor = root;
    for (i, seg) in segments.iter().enumerate() {
        let table = cursor.as_table_mut().ok_or_else(|| {
            Error::config(format!("override {path}: {seg:?} is not inside a table"))
        })?;
        if i + 1 == segments.len() {
            table.insert(seg.to_string(), parse_scalar(raw));
            return Ok(());
        }
        cursor = table
            .entry(seg.to_string())
            .or_insert_with(|| toml::Value::Table(toml::map::Map::new()));
    }
    unreachable!("split never yields zero segments");
}

/// Interprets the right-hand side as a TOML literal (number, bool, array,
/// quoted string); anything that does not parse becomes a bare string, so
/// `--set model.block_order=inherent-first` works without quoting.
fn parse_scalar(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    if let Ok(toml::Value::Table(t)) = wrapped.parse::<toml::Value>() {
        if let Some(v) = t.get("v") {
            return v.clone();
        }
    }
    toml::Value::String(raw.to_string())
}
