use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::ModelError;
use crate::numeric::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Backbone,
    Tokenizer,
    Prompt,
    TaskEmbed,
    FaultBank,
    RulHead,
    Decoder,
}

impl Partition {
    pub const ALL: [Partition; 7] = [
        Partition::Backbone,
        Partition::Tokenizer,
        Partition::Prompt,
        Partition::TaskEmbed,
        Partition::FaultBank,
        Partition::RulHead,
        Partition::Decoder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Partition::Backbone => "backbone",
            Partition::Tokenizer => "tokenizer",
            Partition::Prompt => "prompt",
            Partition::TaskEmbed => "task_embed",
            Partition::FaultBank => "fault_bank",
            Partition::RulHead => "rul_head",
            Partition::Decoder => "decoder",
        }
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Partition {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Partition::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| format!("unknown partition {s}"))
    }
}

/// Training phase; decides which partitions receive updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Pretrain,
    Prompt,
    Finetune,
}

impl TrainMode {
    pub fn trains(self, p: Partition) -> bool {
        use Partition::*;
        match self {
            TrainMode::Pretrain => matches!(p, Backbone | Tokenizer | Prompt | TaskEmbed | Decoder),
            TrainMode::Prompt => matches!(p, Prompt | TaskEmbed | FaultBank | RulHead),
            TrainMode::Finetune => true,
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::Pretrain => "pretrain",
            TrainMode::Prompt => "prompt",
            TrainMode::Finetune => "finetune",
        })
    }
}

impl FromStr for TrainMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pretrain" => Ok(TrainMode::Pretrain),
            "prompt" => Ok(TrainMode::Prompt),
            "finetune" => Ok(TrainMode::Finetune),
            other => Err(format!("unknown mode {other} (expected pretrain, prompt or finetune)")),
        }
    }
}

/// Named `f32` tensors, each tagged with exactly one partition.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    values: BTreeMap<String, Tensor<f32>>,
    partitions: BTreeMap<String, Partition>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a new parameter; names must be unique.
    pub fn insert(&mut self, name: &str, value: Tensor<f32>, partition: Partition) -> Result<(), ModelError> {
        if self.values.contains_key(name) {
            return Err(ModelError::InvalidConfig {
                field: name.to_string(),
                msg: "parameter already exists".into(),
            });
        }
        if !value.is_finite() {
            return Err(ModelError::Numeric(crate::numeric::NumericError::NonFinite { op: "parameter init" }));
        }
        self.values.insert(name.to_string(), value);
        self.partitions.insert(name.to_string(), partition);
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.values.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.values.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.values.get_mut(name)
    }

    pub fn partition(&self, name: &str) -> Option<Partition> {
        self.partitions.get(name).copied()
    }

    pub fn values(&self) -> &BTreeMap<String, Tensor<f32>> {
        &self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>, Partition)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v, self.partitions[k]))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Values converted to another precision.
    pub fn cast<T: Real>(&self) -> BTreeMap<String, Tensor<T>> {
        self.values.iter().map(|(k, v)| (k.clone(), v.cast())).collect()
    }

    pub fn trainable_names(&self, mode: TrainMode) -> BTreeSet<String> {
        self.partitions.iter().filter(|(_, p)| mode.trains(**p)).map(|(k, _)| k.clone()).collect()
    }

    /// Scalar count of parameters in partitions accepted by `filter`.
    pub fn count(&self, filter: impl Fn(Partition) -> bool) -> usize {
        self.values.iter().filter(|(k, _)| filter(self.partitions[*k])).map(|(_, v)| v.len()).sum()
    }

    pub fn total_count(&self) -> usize {
        self.count(|_| true)
    }

    pub fn trainable_count(&self, mode: TrainMode) -> usize {
        self.count(|p| mode.trains(p))
    }

    /// SHA-256 over the little-endian bytes of one parameter.
    pub fn checksum(&self, name: &str) -> Option<String> {
        let v = self.values.get(name)?;
        let mut h = Sha256::new();
        for x in v.data() {
            h.update(x.to_le_bytes());
        }
        Some(hex::encode(h.finalize()))
    }

    /// Checksums of every parameter in the given partitions.
    pub fn checksums(&self, filter: impl Fn(Partition) -> bool) -> BTreeMap<String, String> {
        self.partitions
            .iter()
            .filter(|(_, p)| filter(**p))
            .map(|(k, _)| (k.clone(), self.checksum(k).expect("known name")))
            .collect()
    }
}
