//! Run configuration: presets, file overlay, validation and hashing.
//!
//! A config file is TOML. It may name a `preset` (default `desk`); every key
//! it sets overrides the preset value, and unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::WindowConfig;
use crate::error::ModelError;
use crate::model::ModelConfig;
use crate::training::TrainConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config key `{key}`: {msg}")]
    Invalid { key: String, msg: String },
    #[error("unknown preset `{0}` (expected desk or paper)")]
    UnknownPreset(String),
}

impl ConfigError {
    fn invalid(key: &str, msg: impl Into<String>) -> Self {
        ConfigError::Invalid { key: key.into(), msg: msg.into() }
    }

    pub fn key(&self) -> Option<&str> {
        match self {
            ConfigError::Invalid { key, .. } => Some(key),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub manifests: Vec<PathBuf>,
    pub target_hz: f64,
    pub hop: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifests: Vec::new(),
            target_hz: 5_000.0,
            hop: 2_048,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub run_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            run_dir: PathBuf::from("runs/latest"),
            checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self, ConfigError> {
        let (model, train) = match name {
            "desk" => (ModelConfig::desk(), TrainConfig::desk()),
            "paper" => (ModelConfig::paper(), TrainConfig::paper()),
            other => return Err(ConfigError::UnknownPreset(other.to_string())),
        };
        let mut data = DataConfig::default();
        data.hop = model.window_len;
        Ok(Self {
            preset: name.to_string(),
            model,
            train,
            data,
            output: OutputConfig::default(),
        })
    }

    /// Parses TOML text on top of its preset (or `fallback_preset` when none is named).
    pub fn from_toml_str(text: &str, fallback_preset: &str) -> Result<Self, ConfigError> {
        let overlay: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        let preset = match overlay.get("preset") {
            Some(toml::Value::String(s)) => s.clone(),
            Some(_) => return Err(ConfigError::invalid("preset", "must be a string")),
            None => fallback_preset.to_string(),
        };
        let base = Self::preset(&preset)?;
        let mut merged = toml::Table::try_from(&base).map_err(|e| ConfigError::Parse(e.to_string()))?;
        merge(&mut merged, overlay, "")?;
        let cfg: RunConfig = merged.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path, fallback_preset: &str) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_toml_str(&text, fallback_preset)?;
        if let Some(dir) = path.parent() {
            for m in &mut cfg.data.manifests {
                if m.is_relative() {
                    *m = dir.join(&*m);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    /// Cross-field checks; `check_paths` also requires referenced manifests to exist.
    pub fn validate(&self, check_paths: bool) -> Result<(), ConfigError> {
        self.model.validate().map_err(|e| model_error("model", e))?;
        self.train.validate().map_err(|e| model_error("train", e))?;
        if !(self.data.target_hz > 0.0 && self.data.target_hz.is_finite()) {
            return Err(ConfigError::invalid("data.target_hz", "must be positive"));
        }
        if self.data.hop == 0 {
            return Err(ConfigError::invalid("data.hop", "must be at least 1"));
        }
        if check_paths {
            for m in &self.data.manifests {
                if !m.exists() {
                    return Err(ConfigError::invalid("data.manifests", format!("{} does not exist", m.display())));
                }
            }
        }
        Ok(())
    }

    pub fn window(&self) -> WindowConfig {
        WindowConfig {
            target_hz: self.data.target_hz,
            window_len: self.model.window_len,
            hop: self.data.hop,
        }
    }
}

fn model_error(section: &str, e: ModelError) -> ConfigError {
    match e {
        ModelError::InvalidConfig { field, msg } => ConfigError::invalid(&format!("{section}.{field}"), msg),
        ModelError::PositionTable { signal_len, max } => ConfigError::invalid(&format!("{section}.max_signal_len"), format!("{signal_len} signal tokens exceed the table of {max}")),
        other => ConfigError::invalid(section, other.to_string()),
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table, prefix: &str) -> Result<(), ConfigError> {
    for (k, v) in overlay {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o, &key)?,
            (Some(toml::Value::Table(_)), _) => return Err(ConfigError::invalid(&key, "expected a table")),
            (Some(slot), v) => *slot = v,
            (None, v) => {
                if prefix.is_empty() && k != "preset" {
                    return Err(ConfigError::invalid(&key, "unknown section"));
                }
                base.insert(k, v);
            }
        }
    }
    Ok(())
}

/// Fails when a checkpoint's model section differs from the configured one, naming both values.
pub fn check_compatible(config: &ModelConfig, checkpoint: &ModelConfig) -> Result<(), ConfigError> {
    let a = toml::Table::try_from(config).map_err(|e| ConfigError::Parse(e.to_string()))?;
    let b = toml::Table::try_from(checkpoint).map_err(|e| ConfigError::Parse(e.to_string()))?;
    for (k, v) in &a {
        // Dropout only affects training and may differ between phases.
        if k == "dropout" {
            continue;
        }
        if b.get(k) != Some(v) {
            let theirs = b.get(k).map(|x| x.to_string()).unwrap_or_else(|| "missing".into());
            return Err(ConfigError::invalid(&format!("model.{k}"), format!("checkpoint has {k}={theirs} but config has {k}={v}")));
        }
    }
    Ok(())
}
