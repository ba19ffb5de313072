use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowProvider {
    /// Ground-truth flow from the generator plus a learned patch extractor.
    Oracle,
    /// Small convolutional encoder over the concatenated frames.
    Learned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    /// Square patch side shared by every token stream.
    pub patch: usize,
    /// Token width.
    pub dim: usize,
    pub heads: usize,
    /// Hidden width of the block MLPs as a multiple of `dim`.
    pub mlp_ratio: usize,
    pub activation: Activation,
    /// Frequency scales `K` of the time encoding.
    pub frequency_scales: usize,
    pub flow_blocks: usize,
    pub flow3d_blocks: usize,
    pub geometry_blocks: usize,
    /// `false` bypasses the time conditioning (`F̃ᶜ = Fᶜ`).
    pub time_layers: bool,
    pub flow_provider: FlowProvider,
    /// Hidden width of the decoder heads.
    pub head_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            height: 64,
            width: 64,
            patch: 16,
            dim: 64,
            heads: 4,
            mlp_ratio: 2,
            activation: Activation::Relu,
            frequency_scales: tavo_core::temporal::DEFAULT_FREQUENCY_SCALES,
            flow_blocks: 4,
            flow3d_blocks: 4,
            geometry_blocks: 8,
            time_layers: true,
            flow_provider: FlowProvider::Oracle,
            head_hidden: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return Err(Error::config(format!(
                "patch {} must divide the {}x{} resolution",
                self.patch, self.width, self.height
            )));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::config(format!("{} heads do not divide width {}", self.heads, self.dim)));
        }
        if self.mlp_ratio == 0 || self.head_hidden == 0 {
            return Err(Error::config("mlp ratio and head width must be positive"));
        }
        if self.frequency_scales == 0 || self.frequency_scales > 52 {
            return Err(Error::config("frequency scales must be in 1..=52"));
        }
        if self.flow_provider == FlowProvider::Learned && (self.height % 4 != 0 || self.width % 4 != 0) {
            return Err(Error::config("learned flow provider needs a resolution divisible by 4"));
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn time_dim(&self) -> usize {
        tavo_core::temporal::TimeEncoding::dim(self.frequency_scales)
    }
}
