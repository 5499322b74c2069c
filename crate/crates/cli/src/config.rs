//! Run configuration: a versioned TOML (or JSON) document whose unknown keys
//! are errors, plus `key.path=value` overrides applied before validation.

use std::path::{Path, PathBuf};

use isda::data::{CovSpec, ImageShape};
use isda::train::{ModelSpec, TrainConfig};
use isda::CovMode;
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub verify: VerifyConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub timing: TimingConfig,
    #[serde(default)]
    pub props: PropsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            data: DataConfig::default(),
            model: ModelSpec::default(),
            train: TrainConfig::default(),
            verify: VerifyConfig::default(),
            sweep: SweepConfig::default(),
            timing: TimingConfig::default(),
            props: PropsConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    /// Labeled samples kept for semi-supervised runs; the rest lose labels.
    pub num_labeled: Option<usize>,
    pub split_seed: u64,
    /// Fold the held-out validation quarter back into the labeled set.
    pub remerge_validation: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic {
        num_classes: usize,
        dim: usize,
        separation: f64,
        cov: CovSpec,
        seed: u64,
        train_per_class: usize,
        test_per_class: usize,
    },
    /// Label byte followed by channel-major pixel bytes per record.
    Records {
        train_path: PathBuf,
        test_path: Option<PathBuf>,
        height: usize,
        width: usize,
        channels: usize,
        num_classes: usize,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic {
            num_classes: 10,
            dim: 16,
            separation: 1.5,
            cov: CovSpec::Anisotropic { base: 0.05, dominant: 4.0, orthogonal: true, spread: 1.5 },
            seed: 100,
            train_per_class: 200,
            test_per_class: 500,
        }
    }
}

impl DataSource {
    pub fn image_shape(&self) -> Option<ImageShape> {
        match self {
            DataSource::Records { height, width, channels, .. } => {
                Some(ImageShape { height: *height, width: *width, channels: *channels })
            }
            DataSource::Synthetic { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    /// Monte-Carlo draws per probe sample.
    pub draws: usize,
    /// Training samples (evenly spaced) on which the bound is checked.
    pub probe: usize,
    /// Check every `every` iterations.
    pub every: u64,
    pub mc_seed: u64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig { draws: 1000, probe: 256, every: 10, mc_seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub m_values: Vec<usize>,
    pub replicates: usize,
    pub reference_draws: usize,
    pub lambda0_grid: Vec<f64>,
    pub modes: Vec<CovMode>,
    /// Add a plain cross-entropy arm to the ablation.
    pub include_baseline: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            m_values: vec![1, 2, 5, 10, 20, 50, 100, 1000, 10_000],
            replicates: 20,
            reference_draws: 100_000,
            lambda0_grid: vec![0.1, 0.25, 0.5, 0.75, 1.0],
            modes: vec![CovMode::Identity, CovMode::Diagonal, CovMode::Shared, CovMode::Full],
            include_baseline: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimingConfig {
    pub reps: usize,
}

impl Default for TimingConfig {
    fn default() -> Self {
        TimingConfig { reps: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PropsConfig {
    /// Random instances per property.
    pub cases: usize,
    /// Monte-Carlo draws for the dominance checks.
    pub draws: usize,
}

impl Default for PropsConfig {
    fn default() -> Self {
        PropsConfig { cases: 30, draws: 100_000 }
    }
}

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

fn err(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

/// Reads `path` (TOML unless it ends in `.json`), or starts from defaults.
pub fn load(path: Option<&Path>) -> Result<toml::Value, ConfigError> {
    let Some(path) = path else {
        return toml::Value::try_from(RunConfig::default()).map_err(|e| err(e.to_string()));
    };
    let text = std::fs::read_to_string(path).map_err(|e| err(format!("{}: {e}", path.display())))?;
    if path.extension().is_some_and(|e| e == "json") {
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| err(format!("{}: {e}", path.display())))?;
        toml::Value::try_from(cfg).map_err(|e| err(e.to_string()))
    } else {
        text.parse::<toml::Table>().map(toml::Value::Table).map_err(|e| err(format!("{}: {e}", path.display())))
    }
}

/// Sets `a.b.c = value`, creating tables on the way. The value is read as
/// a TOML literal and falls back to a bare string.
pub fn apply_override(root: &mut toml::Value, spec: &str) -> Result<(), ConfigError> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| err(format!("override `{spec}` is not key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(err(format!("override `{spec}` has an empty key segment")));
    }
    let value = format!("v = {}", raw.trim())
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        let table = node.as_table_mut().ok_or_else(|| err(format!("`{key}` descends into a non-table")))?;
        node = table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let table = node.as_table_mut().ok_or_else(|| err(format!("`{key}` descends into a non-table")))?;
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Loads, overrides and validates; the result is fully resolved.
pub fn resolve(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<RunConfig, ConfigError> {
    let mut value = load(path)?;
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    if let Some(seed) = seed {
        apply_override(&mut value, &format!("train.seed = {seed}"))?;
    }
    let cfg: RunConfig = value.try_into().map_err(|e: toml::de::Error| err(e.to_string()))?;
    if cfg.schema_version != SCHEMA_VERSION {
        return Err(err(format!("schema_version {} is not supported (expected {SCHEMA_VERSION})", cfg.schema_version)));
    }
    cfg.train.validate().map_err(|e| err(e.to_string()))?;
    if cfg.verify.draws < 2 || cfg.verify.probe == 0 || cfg.verify.every == 0 {
        return Err(err("verify needs draws >= 2, probe >= 1 and every >= 1"));
    }
    if cfg.sweep.replicates < 2 || cfg.sweep.reference_draws < 2 || cfg.sweep.m_values.contains(&0) {
        return Err(err("sweep needs replicates >= 2, reference_draws >= 2 and every M >= 1"));
    }
    if cfg.timing.reps == 0 || cfg.props.cases == 0 || cfg.props.draws < 2 {
        return Err(err("timing.reps and props.cases must be >= 1, props.draws >= 2"));
    }
    Ok(cfg)
}
