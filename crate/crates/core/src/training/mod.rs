//! Pretraining and adaptation.

pub mod checkpoint;
pub mod optim;
pub mod params;
pub mod trainer;

pub use optim::{AdamConfig, AdamW};
pub use params::{ParameterStore, Partition, TrainMode};
pub use trainer::{epoch_batches, partition_checksums, register_heads, run_phase, run_phase_with, EpochLog, RunLog, StepLog, TrainConfig, Trainer};
