#![allow(dead_code)]

use candle_core::Device;
use tavo_core::synth::{FramePair, SceneKind, SceneSpec, Sequence};
use tavo_model::data::Batch;
use tavo_model::{ModelConfig, TrainConfig};

/// Narrow network that keeps debug-profile tests fast.
pub fn small_model() -> ModelConfig {
    ModelConfig {
        dim: 16,
        heads: 2,
        flow_blocks: 1,
        flow3d_blocks: 1,
        geometry_blocks: 1,
        head_hidden: 32,
        ..ModelConfig::default()
    }
}

pub fn small_train(iterations: usize) -> TrainConfig {
    TrainConfig {
        model: small_model(),
        iterations,
        batch_size: 4,
        log_every: 0,
        ..TrainConfig::default()
    }
}

pub fn short_sequence(seed: u64) -> Sequence {
    let mut spec = SceneSpec::desk(seed, SceneKind::PlaneBoxes);
    spec.motion.duration = 2.0;
    Sequence::new(&spec).unwrap()
}

pub fn batch(pairs: &[FramePair], cfg: &ModelConfig) -> Batch {
    let refs: Vec<&FramePair> = pairs.iter().collect();
    Batch::from_pairs(&refs, cfg, &Device::Cpu).unwrap()
}
