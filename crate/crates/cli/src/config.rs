//! Declarative run configuration: one TOML file plus `--set key=value`
//! overrides, resolved into a single canonical value for digesting.

use std::path::Path;

use serde::{Deserialize, Serialize};
use stagecast::dataset::SplitMode;
use stagecast::models::{FcNetConfig, ForecasterConfig};
use stagecast::synthetic::WorldConfig;
use stagecast::{DatasetVariant, ModelConfig, TrainConfig};

use crate::error::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub world: WorldConfig,
    pub data: DataConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
}

/// How `train` and `eval` carve a dataset file into train and test parts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Share of entries used for training; 1.0 trains on everything.
    pub train_fraction: f64,
    pub split: SplitMode,
    pub split_seed: u64,
    /// Keep only entries at whole hours.
    pub hourly_only: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_fraction: 0.8,
            split: SplitMode::Random,
            split_seed: 0,
            hourly_only: false,
        }
    }
}

/// Architecture overrides; anything unset takes the published layout.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub fc_widths: Option<Vec<usize>>,
    pub gru_width: Option<usize>,
    pub gru: Option<ForecasterConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ModelKind {
    Fc,
    Gru,
}

impl ModelSection {
    pub fn resolve(&self, kind: ModelKind, variant: DatasetVariant) -> Result<ModelConfig, CliError> {
        let mc = match kind {
            ModelKind::Fc => ModelConfig::Fc(match &self.fc_widths {
                Some(w) => FcNetConfig { widths: w.clone() },
                None => FcNetConfig::paper(variant),
            }),
            ModelKind::Gru => ModelConfig::Gru(match (&self.gru, self.gru_width) {
                (Some(_), Some(_)) => {
                    return Err(CliError::Usage("set model.gru or model.gru_width, not both".into()))
                }
                (Some(c), None) => c.clone(),
                (None, Some(w)) => ForecasterConfig::with_gru_width(w),
                (None, None) => ForecasterConfig::default(),
            }),
        };
        mc.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(mc)
    }
}

/// Reads `path` (if any), applies `overrides`, and deserializes.
pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, CliError> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
            text.parse::<toml::Table>()
                .map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Usage(format!("config: {e}")))
}

/// `a.b.c=value`; the value is read as a TOML literal, else as a string.
fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override `{spec}` must be KEY=VALUE")))?;
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let path: Vec<&str> = key.trim().split('.').collect();
    let (last, parents) = path.split_last().expect("split yields one part");
    let mut cur = table;
    for p in parents {
        let next = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = next
            .as_table_mut()
            .ok_or_else(|| CliError::Usage(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
