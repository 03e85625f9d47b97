//! TOML run configuration. Every value is optional; a command resolves each
//! setting as flag, then file, then built-in default. The output directory
//! additionally honours `MOVEPRED_OUT` between the flag and the file.

use crate::CliError;
use chrono::NaiveDate;
use movepred_core::model::{AttentionMode, BlstmReadout};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub strategy: StrategySection,
    pub mc: McSection,
    pub baseline: BaselineSection,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub prices: Option<PathBuf>,
    pub tweets: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub ticker: Option<String>,
    pub min_count: Option<usize>,
    pub min_retweets: Option<u64>,
    pub horizon: Option<usize>,
    pub threshold: Option<usize>,
    pub train_end: Option<NaiveDate>,
    pub val_end: Option<NaiveDate>,
    pub test_end: Option<NaiveDate>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub kind: Option<String>,
    pub head: Option<String>,
    pub embed_dim: Option<usize>,
    pub max_len: Option<usize>,
    pub tiny: Option<bool>,
    pub fine_tune: Option<bool>,
    pub second_attention: Option<AttentionMode>,
    pub readout: Option<BlstmReadout>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub shuffle: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrategySection {
    pub kind: Option<String>,
    pub cost_rate: Option<f64>,
    pub shares: Option<f64>,
    pub start: Option<NaiveDate>,
    pub end: Option<NaiveDate>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McSection {
    pub runs: Option<usize>,
    pub pick: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineSection {
    pub indicator: Option<String>,
    pub window: Option<usize>,
    pub fast: Option<usize>,
    pub slow: Option<usize>,
    pub signal: Option<usize>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }
}

/// Flag, then file, then default.
pub fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

/// Flag, then file; missing in both is a usage error naming the flag.
pub fn require<T>(flag: Option<T>, file: Option<T>, name: &str) -> Result<T, CliError> {
    flag.or(file)
        .ok_or_else(|| CliError::Usage(format!("missing required `--{name}` (flag or config)")))
}

/// Parses a `FromStr` option value, turning failures into usage errors.
pub fn parse_choice<T>(value: &str) -> Result<T, CliError>
where
    T: std::str::FromStr<Err = String>,
{
    value.parse().map_err(CliError::Usage)
}

/// Clap parser for serde enums spelled in kebab case.
pub fn parse_kebab<T: serde::de::DeserializeOwned>(value: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(value.to_string())).map_err(|e| e.to_string())
}
