//! Binary checkpoint: magic, version, JSON header, little-endian f32 payload.
//!
//! ```text
//! "RMGPT\0" | u32 LE version | u64 LE header length | header JSON | payload
//! ```
//!
//! Entry offsets are byte offsets from the start of the payload. Entries are
//! written in name order and the header has no timestamps, so identical
//! models produce identical bytes.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::ModelError;
use crate::model::{HeadSpec, ModelConfig, RmGpt};
use crate::numeric::Tensor;
use crate::training::params::{ParameterStore, Partition};

pub const MAGIC: &[u8; 6] = b"RMGPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntryHeader {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub partition: Partition,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub seed: u64,
    pub config: ModelConfig,
    pub heads: Vec<HeadSpec>,
    pub entries: Vec<EntryHeader>,
}

pub fn to_bytes(model: &RmGpt) -> Vec<u8> {
    let mut entries = Vec::with_capacity(model.store.len());
    let mut offset = 0u64;
    for (name, value, partition) in model.store.iter() {
        entries.push(EntryHeader {
            name: name.to_string(),
            dtype: "f32".into(),
            shape: value.shape().to_vec(),
            offset,
            partition,
        });
        offset += 4 * value.len() as u64;
    }
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        seed: model.seed,
        config: model.config.clone(),
        heads: model.heads.values().cloned().collect(),
        entries,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(18 + json.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, value, _) in model.store.iter() {
        for x in value.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn read_header(bytes: &[u8]) -> Result<(CheckpointHeader, usize), CheckpointError> {
    if bytes.len() < 18 || &bytes[..6] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let len = u64::from_le_bytes(bytes[10..18].try_into().expect("8 bytes")) as usize;
    let end = 18usize.checked_add(len).filter(|&e| e <= bytes.len()).ok_or_else(|| CheckpointError::Corrupt("header runs past end of file".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[18..end])?;
    if header.format_version != version {
        return Err(CheckpointError::Corrupt(format!("header version {} differs from preamble {version}", header.format_version)));
    }
    Ok((header, end))
}

pub fn from_bytes(bytes: &[u8]) -> Result<RmGpt, CheckpointError> {
    let (header, start) = read_header(bytes)?;
    header.config.validate()?;
    let payload = &bytes[start..];
    let mut store = ParameterStore::new();
    let mut expected = 0u64;
    for e in &header.entries {
        if e.dtype != "f32" {
            return Err(CheckpointError::Corrupt(format!("{}: unsupported dtype {}", e.name, e.dtype)));
        }
        if e.offset != expected {
            return Err(CheckpointError::Corrupt(format!("{}: offset {} where {expected} was expected", e.name, e.offset)));
        }
        let n: usize = e.shape.iter().product();
        let lo = e.offset as usize;
        let hi = lo + 4 * n;
        if hi > payload.len() {
            return Err(CheckpointError::Corrupt(format!("{}: payload truncated", e.name)));
        }
        let data = payload[lo..hi].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let tensor = Tensor::new(&e.shape, data).map_err(ModelError::from)?;
        store.insert(&e.name, tensor, e.partition)?;
        expected = hi as u64;
    }
    if expected as usize != payload.len() {
        return Err(CheckpointError::Corrupt(format!("{} trailing bytes", payload.len() - expected as usize)));
    }
    let heads: BTreeMap<String, HeadSpec> = header.heads.into_iter().map(|h| (h.dataset.clone(), h)).collect();
    Ok(RmGpt {
        config: header.config,
        heads,
        store,
        seed: header.seed,
    })
}

/// Writes the checkpoint and returns its SHA-256.
pub fn save(model: &RmGpt, path: &Path) -> Result<String, CheckpointError> {
    let bytes = to_bytes(model);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn load(path: &Path) -> Result<RmGpt, CheckpointError> {
    from_bytes(&std::fs::read(path)?)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_hash(path: &Path) -> Result<String, CheckpointError> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::TaskKind;

    fn model() -> RmGpt {
        let cfg = ModelConfig {
            d_model: 8,
            heads: 2,
            d_ff: 16,
            layers: 1,
            window_len: 64,
            patch_len: 16,
            stride: 16,
            max_signal_len: 8,
            ..ModelConfig::desk()
        };
        let mut m = RmGpt::new(cfg, 1).unwrap();
        m.add_head(HeadSpec {
            dataset: "life".into(),
            task: TaskKind::Prognosis,
            channels: 2,
            classes: 4,
        })
        .unwrap();
        m
    }

    #[test]
    fn round_trip_is_exact() {
        let m = model();
        let bytes = to_bytes(&m);
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(to_bytes(&back), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = to_bytes(&model());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes(&bad), Err(CheckpointError::BadMagic)));
        let mut bad = bytes.clone();
        bad[6] = 9;
        assert!(matches!(from_bytes(&bad), Err(CheckpointError::UnsupportedVersion(9))));
        assert!(matches!(from_bytes(&bytes[..bytes.len() - 3]), Err(CheckpointError::Corrupt(_))));
    }

    #[test]
    fn save_and_hash() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/model.ckpt");
        let h = save(&model(), &p).unwrap();
        assert_eq!(h, file_hash(&p).unwrap());
        assert_eq!(load(&p).unwrap(), model());
    }
}
