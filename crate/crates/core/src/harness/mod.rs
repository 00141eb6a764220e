//! Data ingestion, model wiring, training, evaluation, inference and
//! checkpoint persistence.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
pub mod fixtures;
mod infer;
mod model;
pub mod synthetic;
pub mod train;

pub use config::{ClipBackendKind, ClipConfig, ExperimentConfig, ModelConfig};
pub use eval::{evaluate, EvalReport};
pub use infer::{infer, InferOutcome};
pub use model::{build_clip, LccoModel, SetOutput};
pub use train::{train, TrainOutcome, Trainer};
