//! RmGPT: a unified diagnosis and prognosis model for rotating-machinery signals.

pub mod backbone;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod model;
pub mod numeric;
pub mod rng;
pub mod token_space;
pub mod tokenizer;
pub mod training;

pub use config::RunConfig;
pub use error::{Error, ModelError, Result};
pub use model::{HeadSpec, ModelConfig, RmGpt};
