//! Time-conditioned two-frame egomotion network on top of `tavo-core`:
//! candle layers, custom differentiable ops, multi-rate training,
//! checkpoints, inference and the ablation harness.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod infer;
pub mod network;
pub mod nn;
pub mod ops;
pub mod train;

pub use config::{Activation, FlowProvider, ModelConfig};
pub use error::{Error, Result};
pub use network::{EgomotionNet, EgomotionPrediction};
pub use train::{train, TrainConfig, TrainingData};
