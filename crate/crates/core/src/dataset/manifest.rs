use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::DataError;
use crate::numeric::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Diagnosis,
    Prognosis,
    Unlabeled,
}

/// On-disk encoding of record payloads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PayloadKind {
    /// Headerless little-endian `f32`, sample-major (`M` floats per frame).
    #[default]
    F32le,
    /// Headerless CSV, one frame per line, `M` numeric columns.
    Csv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordEntry {
    /// Payload path, relative to the manifest's directory.
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    /// Normalized remaining useful life in `[0, 1]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rul: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition_tag: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub task: TaskKind,
    pub channels: usize,
    pub sample_rate_hz: f64,
    #[serde(default)]
    pub payload: PayloadKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub class_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor_count: Option<usize>,
    #[serde(default)]
    pub records: Vec<RecordEntry>,
    /// Directory payload paths are resolved against.
    #[serde(skip)]
    pub root: PathBuf,
}

fn invalid(field: &str, record: Option<usize>, msg: impl Into<String>) -> DataError {
    DataError::Invalid {
        field: field.to_string(),
        record,
        msg: msg.into(),
    }
}

impl DatasetManifest {
    /// Class count for diagnosis, anchor count for prognosis, 0 when unlabeled.
    pub fn num_classes(&self) -> usize {
        match self.task {
            TaskKind::Diagnosis => self.class_names.len(),
            TaskKind::Prognosis => self.anchor_count.unwrap_or(0),
            TaskKind::Unlabeled => 0,
        }
    }

    pub fn payload_path(&self, record: usize) -> PathBuf {
        self.root.join(&self.records[record].path)
    }

    /// Checks every structural invariant; `check_files` also requires payloads to exist.
    pub fn validate(&self, check_files: bool) -> Result<(), DataError> {
        if self.name.trim().is_empty() {
            return Err(invalid("name", None, "must not be empty"));
        }
        if self.channels == 0 {
            return Err(invalid("channels", None, "must be at least 1"));
        }
        if !(self.sample_rate_hz.is_finite() && self.sample_rate_hz > 0.0) {
            return Err(invalid("sample_rate_hz", None, "must be positive"));
        }
        if self.records.is_empty() {
            return Err(DataError::EmptyDataset(self.name.clone()));
        }
        let classes = self.num_classes();
        match self.task {
            TaskKind::Diagnosis if classes < 2 => return Err(invalid("class_names", None, format!("need at least 2 classes, got {classes}"))),
            TaskKind::Prognosis if classes < 2 => return Err(invalid("anchor_count", None, format!("need at least 2 anchors, got {classes}"))),
            _ => {}
        }
        for (i, r) in self.records.iter().enumerate() {
            match (self.task, r.label, r.rul) {
                (_, Some(_), Some(_)) => return Err(invalid("records", Some(i), "record carries both label and rul")),
                (TaskKind::Diagnosis, None, _) => return Err(invalid("label", Some(i), "diagnosis record without label")),
                (TaskKind::Diagnosis, Some(label), None) if label >= classes => {
                    return Err(DataError::LabelOutOfRange { record: i, label, classes })
                }
                (TaskKind::Prognosis, _, None) => return Err(invalid("rul", Some(i), "prognosis record without rul")),
                (TaskKind::Prognosis, None, Some(rul)) if !(0.0..=1.0).contains(&rul) => {
                    return Err(invalid("rul", Some(i), format!("rul {rul} outside [0, 1]")))
                }
                (TaskKind::Unlabeled, Some(_), _) | (TaskKind::Unlabeled, _, Some(_)) => {
                    return Err(invalid("records", Some(i), "unlabeled record carries a target"))
                }
                _ => {}
            }
            if check_files && !self.payload_path(i).is_file() {
                return Err(invalid("path", Some(i), format!("payload {} not found", self.payload_path(i).display())));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        fs::write(path, self.to_toml())?;
        Ok(())
    }

    /// Reads the payload of one record as an `[L_raw, M]` tensor.
    pub fn read_payload(&self, record: usize) -> Result<Tensor<f32>, DataError> {
        let path = self.payload_path(record);
        let m = self.channels;
        let data = match self.payload {
            PayloadKind::F32le => {
                let bytes = fs::read(&path)?;
                if bytes.len() % (4 * m) != 0 {
                    return Err(invalid("path", Some(record), format!("payload size {} is not a multiple of {} bytes", bytes.len(), 4 * m)));
                }
                bytes
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    .collect::<Vec<_>>()
            }
            PayloadKind::Csv => {
                let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_path(&path).map_err(|e| csv_err(&path, e))?;
                let mut out = Vec::new();
                for (line, row) in rdr.records().enumerate() {
                    let row = row.map_err(|e| csv_err(&path, e))?;
                    if row.len() != m {
                        return Err(invalid("path", Some(record), format!("line {} has {} columns, expected {m}", line + 1, row.len())));
                    }
                    for cell in row.iter() {
                        out.push(cell.trim().parse::<f32>().map_err(|e| DataError::Parse {
                            path: path.display().to_string(),
                            msg: format!("line {}: {e}", line + 1),
                        })?);
                    }
                }
                out
            }
        };
        if data.iter().any(|v| !v.is_finite()) {
            return Err(DataError::NonFinite(path.display().to_string()));
        }
        let frames = data.len() / m;
        Ok(Tensor::new(&[frames, m], data)?)
    }
}

fn csv_err(path: &Path, e: csv::Error) -> DataError {
    DataError::Parse {
        path: path.display().to_string(),
        msg: e.to_string(),
    }
}

/// Parses and validates a manifest; payload paths resolve relative to its directory.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest, DataError> {
    let text = fs::read_to_string(path)?;
    let mut manifest: DatasetManifest = toml::from_str(&text).map_err(|e| DataError::Parse {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    manifest.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    manifest.validate(true)?;
    Ok(manifest)
}

/// Writes an `[L, M]` tensor as sample-major little-endian `f32`.
pub fn write_f32le(path: &Path, signal: &Tensor<f32>) -> Result<(), DataError> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for v in signal.data() {
        f.write_all(&v.to_le_bytes())?;
    }
    f.flush()?;
    Ok(())
}
