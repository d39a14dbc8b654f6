//! Experiment configuration: strict TOML parsing, flat key=value overrides,
//! and the fully-resolved snapshot written next to a run's outputs.

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use gpg_core::TrainConfig;

/// Which metrics files a run writes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MetricsFormat {
    Csv,
    Jsonl,
    #[default]
    Both,
}

impl MetricsFormat {
    pub fn csv(self) -> bool {
        matches!(self, MetricsFormat::Csv | MetricsFormat::Both)
    }

    pub fn jsonl(self) -> bool {
        matches!(self, MetricsFormat::Jsonl | MetricsFormat::Both)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub formats: MetricsFormat,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/out"),
            formats: MetricsFormat::default(),
        }
    }
}

/// Everything a `train` invocation needs: the training config, where to
/// write outputs, and an optional seed list for sweeps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub output: OutputConfig,
    /// When present, one run per seed plus an aggregate summary.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<u64>>,
}

#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for ConfigError {}

impl ExperimentConfig {
    /// Parse TOML text, apply `key=value` overrides (dotted paths into the
    /// document), and deserialize strictly: unknown keys anywhere are
    /// rejected with the offending location.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut doc: toml::Value = text
            .parse()
            .map_err(|e: toml::de::Error| ConfigError(format!("config parse error: {e}")))?;
        for entry in overrides {
            apply_override(&mut doc, entry)?;
        }
        let cfg: ExperimentConfig = doc
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError(format!("config error: {e}")))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.train
            .validate()
            .map_err(|e| ConfigError(format!("config error: {e}")))?;
        if let Some(seeds) = &self.seeds {
            if seeds.is_empty() {
                return Err(ConfigError(
                    "config error: seeds must be non-empty when sweeping".into(),
                ));
            }
        }
        Ok(())
    }

    /// The seeds this experiment runs, in order.
    pub fn run_seeds(&self) -> Vec<u64> {
        match &self.seeds {
            Some(list) => list.clone(),
            None => vec![self.train.seed],
        }
    }

    /// Serialize the fully-materialized config; re-parsing this snapshot
    /// reproduces the configuration exactly.
    pub fn to_resolved_toml(&self) -> Result<String, ConfigError> {
        toml::to_string_pretty(self)
            .map_err(|e| ConfigError(format!("failed to serialize resolved config: {e}")))
    }
}

/// Set `path.to.key=value` inside a TOML document, creating tables along
/// the way. The value is parsed as TOML (so `0.5`, `true`, `[1,2]` work);
/// anything that does not parse is taken as a bare string.
fn apply_override(doc: &mut toml::Value, entry: &str) -> Result<(), ConfigError> {
    let (path, raw_value) = entry
        .split_once('=')
        .ok_or_else(|| ConfigError(format!("override {entry:?} is not of the form key=value")))?;
    let path = path.trim();
    if path.is_empty() {
        return Err(ConfigError(format!("override {entry:?} has an empty key")));
    }
    let value = parse_scalar(raw_value.trim());

    let mut node = doc;
    let segments: Vec<&str> = path.split('.').collect();
    for (i, seg) in segments.iter().enumerate() {
        let table = node.as_table_mut().ok_or_else(|| {
            ConfigError(format!(
                "override {entry:?}: {} is not a table",
                segments[..i].join(".")
            ))
        })?;
        if i == segments.len() - 1 {
            table.insert((*seg).to_string(), value);
            return Ok(());
        }
        node = table
            .entry((*seg).to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    unreachable!("split('.') yields at least one segment");
}

fn parse_scalar(raw: &str) -> toml::Value {
    let probe = format!("v = {raw}");
    match probe.parse::<toml::Value>() {
        Ok(toml::Value::Table(mut t)) => t.remove("v").unwrap(),
        _ => toml::Value::String(raw.to_string()),
    }
}
