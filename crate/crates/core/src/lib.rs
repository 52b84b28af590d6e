//! Hidden-representation extraction and fusion on top of a small Transformer
//! encoder, with a reverse-mode autodiff core, training loop, metrics and
//! analysis tooling.

pub mod analysis;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod extractor;
pub mod fusion;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod recurrent;
pub mod training;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use model::{Model, ModelConfig, Variant};
