//! Dataset ingestion: manifests, resampling, windowing, synthetic data and splits.

pub mod manifest;
pub mod resample;
pub mod split;
pub mod synth;
pub mod window;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use manifest::{load_manifest, write_f32le, DatasetManifest, PayloadKind, RecordEntry, TaskKind};
pub use resample::resample;
pub use split::{few_shot_split, holdout_split, Split};
pub use synth::{generate_synthetic, SynthMode, SyntheticDataset, SyntheticSpec};
pub use window::{extract_windows, window_and_standardize, window_count, SignalWindow, WindowSource, SIGMA_FLOOR};

use crate::numeric::{NumericError, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("cannot parse {path}: {msg}")]
    Parse { path: String, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("invalid {field}{}: {msg}", record.map(|r| format!(" (record {r})")).unwrap_or_default())]
    Invalid { field: String, record: Option<usize>, msg: String },
    #[error("empty dataset: {0} has no records")]
    EmptyDataset(String),
    #[error("label out of range: record {record} has label {label} but only {classes} classes")]
    LabelOutOfRange { record: usize, label: usize, classes: usize },
    #[error("upsampling from {from_hz} Hz to {to_hz} Hz is not supported")]
    Upsample { from_hz: f64, to_hz: f64 },
    #[error("non-finite samples in {0}")]
    NonFinite(String),
    #[error("signal of {len} frames is shorter than the {window}-frame window")]
    TooShort { len: usize, window: usize },
    #[error("class {class} has {have} records, need at least {need}")]
    InsufficientClass { class: usize, have: usize, need: usize },
    #[error(transparent)]
    Numeric(#[from] NumericError),
}

/// Supervision attached to a window.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Target {
    Class(usize),
    Rul(f32),
    Unlabeled,
}

impl Target {
    pub fn class(&self) -> Option<usize> {
        match self {
            Target::Class(c) => Some(*c),
            _ => None,
        }
    }

    pub fn rul(&self) -> Option<f32> {
        match self {
            Target::Rul(r) => Some(*r),
            _ => None,
        }
    }
}

/// A raw (unstandardized) `[L, M]` window; standardization happens at tokenization.
#[derive(Clone, Debug, PartialEq)]
pub struct RawWindow {
    pub raw: Tensor<f32>,
    pub target: Target,
    pub source: WindowSource,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowConfig {
    pub target_hz: f64,
    pub window_len: usize,
    pub hop: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            target_hz: 5_000.0,
            window_len: 2_048,
            hop: 2_048,
        }
    }
}

/// All windows of one dataset, ordered by (record index, window index).
#[derive(Clone, Debug)]
pub struct WindowSet {
    pub dataset: String,
    pub task: TaskKind,
    pub channels: usize,
    pub classes: usize,
    pub windows: Vec<RawWindow>,
}

impl WindowSet {
    /// Builds windows from in-memory payloads (one per manifest record).
    pub fn from_payloads(manifest: &DatasetManifest, payloads: &[Tensor<f32>], cfg: &WindowConfig) -> Result<Self, DataError> {
        Self::build(manifest, cfg, |i| Ok(payloads[i].clone()))
    }

    /// Reads every payload referenced by the manifest from disk.
    pub fn load(manifest: &DatasetManifest, cfg: &WindowConfig) -> Result<Self, DataError> {
        Self::build(manifest, cfg, |i| manifest.read_payload(i))
    }

    fn build<F>(manifest: &DatasetManifest, cfg: &WindowConfig, read: F) -> Result<Self, DataError>
    where
        F: Fn(usize) -> Result<Tensor<f32>, DataError> + Sync,
    {
        let per_record: Vec<Vec<RawWindow>> = (0..manifest.records.len())
            .into_par_iter()
            .map(|i| {
                let rec = &manifest.records[i];
                let signal = resample(&read(i)?, manifest.sample_rate_hz, cfg.target_hz)?;
                let target = match (rec.label, rec.rul) {
                    (Some(c), _) => Target::Class(c),
                    (None, Some(r)) => Target::Rul(r as f32),
                    _ => Target::Unlabeled,
                };
                extract_windows(&signal, cfg.window_len, cfg.hop)
                    .map_err(|e| match e {
                        DataError::TooShort { len, window } => DataError::Invalid {
                            field: "path".into(),
                            record: Some(i),
                            msg: format!("{len} frames after resampling, window needs {window}"),
                        },
                        other => other,
                    })?
                    .into_iter()
                    .enumerate()
                    .map(|(w, raw)| {
                        Ok(RawWindow {
                            raw,
                            target,
                            source: WindowSource {
                                dataset: manifest.name.clone(),
                                record: i,
                                offset: w * cfg.hop,
                            },
                        })
                    })
                    .collect()
            })
            .collect::<Result<_, DataError>>()?;
        Ok(Self {
            dataset: manifest.name.clone(),
            task: manifest.task,
            channels: manifest.channels,
            classes: manifest.num_classes(),
            windows: per_record.into_iter().flatten().collect(),
        })
    }

    /// Windows whose source record is in `records` (sorted or not), preserving order.
    pub fn subset(&self, records: &[usize]) -> Self {
        let keep: std::collections::BTreeSet<usize> = records.iter().copied().collect();
        Self {
            dataset: self.dataset.clone(),
            task: self.task,
            channels: self.channels,
            classes: self.classes,
            windows: self.windows.iter().filter(|w| keep.contains(&w.source.record)).cloned().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }
}
