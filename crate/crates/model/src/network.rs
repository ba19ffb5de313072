//! The egomotion network.
//!
//! Time-aware flow encoder: flow features `Fᶜ` are modulated by
//! `(1 + α(PE(Δt))) ⊙ Fᶜ + β(PE(Δt))` and run through self-attention; the 3D
//! flow `S` gets its own attention stream; the two are fused per token and
//! mean-pooled into `F_TA`. Geometry encoder: patches of `[r, M, D]` through
//! self-attention, mean-pooled into `F_GA`. Decoder: two MLP heads on
//! `[F_TA, F_GA]` giving the Fisher parameter and the metric translation.

use candle_core::{Tensor, D};
use nalgebra::{Matrix3, Vector3};
use tavo_core::fisher::fisher_mode;

use crate::config::{FlowProvider, ModelConfig};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::nn::{activate, run_blocks, Block, LayerNorm, Linear, Mlp, ParamStore, PatchEmbed};
use crate::ops::flow3d;

/// Flow in pixels is divided by this before embedding.
pub const FLOW_NORM: f64 = 8.0;

/// Scene-flow components pass through `x / (1 + |x| / c)` with this `c`
/// (meters) before embedding, so occlusion outliers cannot dominate.
/// The rotation head output is multiplied by this, so sharp Fisher
/// parameters do not require large trunk activations.
pub const FISHER_SCALE: f64 = 100.0;

pub const MOTION_SOFT_CLIP: f64 = 4.0;

/// Soft-clips channels 0–2 of the `(B, 4, H, W)` flow3d output.
pub fn compress_motion(motion: &Tensor) -> Result<Tensor> {
    let s = motion.narrow(1, 0, 3)?;
    let mask = motion.narrow(1, 3, 1)?;
    let squashed = (&s / ((s.abs()? / MOTION_SOFT_CLIP)? + 1.0)?)?;
    Ok(Tensor::cat(&[&squashed, &mask], 1)?)
}

/// Flow provider turning a frame pair into dense flow and flow features.
enum FlowEncoder {
    Oracle {
        embed: PatchEmbed,
        mix: Linear,
    },
    Learned {
        conv1: (Tensor, Tensor),
        conv2: (Tensor, Tensor),
        flow_head: (Tensor, Tensor),
        embed: PatchEmbed,
    },
}

/// Output of the flow provider: pixel flow `(B, 2, H, W)` and feature tokens
/// `(B, N, C)`, the row-major flattening of the `H_F×W_F×C_F` feature map.
pub struct FlowOutput {
    pub flow: Tensor,
    pub features: Tensor,
}

pub struct EgomotionNet {
    pub config: ModelConfig,
    params: ParamStore,
    flow_encoder: FlowEncoder,
    alpha: Linear,
    beta: Linear,
    flow_blocks: Vec<Block>,
    flow3d_embed: PatchEmbed,
    flow3d_blocks: Vec<Block>,
    fuse: Linear,
    geometry_embed: PatchEmbed,
    geometry_blocks: Vec<Block>,
    head_norm: LayerNorm,
    rotation_head: Mlp,
    translation_head: Mlp,
}

/// Decoded prediction for one pair.
#[derive(Debug, Clone, PartialEq)]
pub struct EgomotionPrediction {
    pub fisher: Matrix3<f64>,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub degenerate: bool,
}

fn conv_params(ps: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize) -> Result<(Tensor, Tensor)> {
    let std = (2.0 / (cin * k * k) as f64).sqrt();
    Ok((
        ps.normal(&format!("{name}.weight"), &[cout, cin, k, k], std)?,
        ps.constant(&format!("{name}.bias"), &[cout], 0.0)?,
    ))
}

fn conv(x: &Tensor, (w, b): &(Tensor, Tensor), stride: usize, pad: usize) -> Result<Tensor> {
    let y = x.conv2d(w, pad, stride, 1, 1)?;
    Ok(y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)?)
}

const CONV1: usize = 16;
const CONV2: usize = 32;

impl EgomotionNet {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let cfg = config.clone();
        let mut ps = ParamStore::new(seed);
        let (c, n, p, act) = (cfg.dim, cfg.tokens(), cfg.patch, cfg.activation);
        let block = |ps: &mut ParamStore, name: &str, i: usize| Block::new(ps, &format!("{name}.{i}"), c, cfg.heads, cfg.mlp_ratio, act);

        let flow_encoder = match cfg.flow_provider {
            FlowProvider::Oracle => FlowEncoder::Oracle {
                embed: PatchEmbed::new(&mut ps, "flow_enc.embed", 2, p, n, c)?,
                mix: Linear::new(&mut ps, "flow_enc.mix", c, c)?,
            },
            FlowProvider::Learned => {
                if p % 4 != 0 {
                    return Err(Error::config("learned flow provider needs a patch size divisible by 4"));
                }
                FlowEncoder::Learned {
                    conv1: conv_params(&mut ps, "flow_enc.conv1", 6, CONV1, 3)?,
                    conv2: conv_params(&mut ps, "flow_enc.conv2", CONV1, CONV2, 3)?,
                    flow_head: conv_params(&mut ps, "flow_enc.flow_head", CONV2, 2, 1)?,
                    embed: PatchEmbed::new(&mut ps, "flow_enc.embed", CONV2, p / 4, n, c)?,
                }
            }
        };
        let alpha = Linear::zeros(&mut ps, "time.alpha", cfg.time_dim(), c)?;
        let beta = Linear::zeros(&mut ps, "time.beta", cfg.time_dim(), c)?;
        let flow_blocks = (0..cfg.flow_blocks).map(|i| block(&mut ps, "flow_blocks", i)).collect::<Result<_>>()?;
        let flow3d_embed = PatchEmbed::new(&mut ps, "flow3d.embed", 4, p, n, c)?;
        let flow3d_blocks = (0..cfg.flow3d_blocks).map(|i| block(&mut ps, "flow3d_blocks", i)).collect::<Result<_>>()?;
        let fuse = Linear::new(&mut ps, "fuse", 2 * c, c)?;
        let geometry_embed = PatchEmbed::new(&mut ps, "geometry.embed", 7, p, n, c)?;
        let geometry_blocks = (0..cfg.geometry_blocks).map(|i| block(&mut ps, "geometry_blocks", i)).collect::<Result<_>>()?;
        let head_norm = LayerNorm::new(&mut ps, "head.norm", 2 * c)?;
        let rotation_head = Mlp::new(&mut ps, "head.rotation", 2 * c, cfg.head_hidden, 9, act)?;
        let translation_head = Mlp::new(&mut ps, "head.translation", 2 * c, cfg.head_hidden, 3, act)?;
        Ok(EgomotionNet {
            config: cfg,
            params: ps,
            flow_encoder,
            alpha,
            beta,
            flow_blocks,
            flow3d_embed,
            flow3d_blocks,
            fuse,
            geometry_embed,
            geometry_blocks,
            head_norm,
            rotation_head,
            translation_head,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn flow_encode(&self, batch: &Batch) -> Result<FlowOutput> {
        match &self.flow_encoder {
            FlowEncoder::Oracle { embed, mix } => {
                let flow = batch
                    .flow
                    .as_ref()
                    .ok_or_else(|| Error::config("oracle flow provider needs ground-truth flow in the batch"))?
                    .clone();
                let tokens = activate(&embed.forward(&(&flow / FLOW_NORM)?)?, self.config.activation)?;
                Ok(FlowOutput {
                    features: mix.forward(&tokens)?,
                    flow,
                })
            }
            FlowEncoder::Learned {
                conv1,
                conv2,
                flow_head,
                embed,
            } => {
                let images = batch
                    .images
                    .as_ref()
                    .ok_or_else(|| Error::config("learned flow provider needs images in the batch"))?;
                let (h, w) = (self.config.height, self.config.width);
                let x = conv(images, conv1, 2, 1)?.relu()?;
                let x = conv(&x, conv2, 2, 1)?.relu()?;
                let flow = (conv(&x, flow_head, 1, 0)?.upsample_nearest2d(h, w)? * FLOW_NORM)?;
                Ok(FlowOutput {
                    features: embed.forward(&x)?,
                    flow,
                })
            }
        }
    }

    /// `(1 + α) ⊙ Fᶜ + β`, or `Fᶜ` unchanged when time layers are disabled.
    pub fn condition(&self, features: &Tensor, time: &Tensor) -> Result<Tensor> {
        if !self.config.time_layers {
            return Ok(features.clone());
        }
        let (b, _, c) = features.dims3()?;
        let alpha = self.alpha.forward(time)?.reshape((b, 1, c))?;
        let beta = self.beta.forward(time)?.reshape((b, 1, c))?;
        Ok(features.broadcast_mul(&(alpha + 1.0)?)?.broadcast_add(&beta)?)
    }

    /// Pooled time-aware flow feature `F_TA`, `(B, C)`.
    pub fn time_aware_flow_feature(&self, features: &Tensor, time: &Tensor, motion: &Tensor) -> Result<Tensor> {
        let f = run_blocks(&self.flow_blocks, self.condition(features, time)?)?;
        let s = run_blocks(&self.flow3d_blocks, self.flow3d_embed.forward(&compress_motion(motion)?)?)?;
        let fused = self.fuse.forward(&Tensor::cat(&[&f, &s], D::Minus1)?)?;
        Ok(fused.mean(1)?)
    }

    /// Pooled geometry feature `F_GA`, `(B, C)`, from `[r, M, D]` maps.
    pub fn geometry_context_encode(&self, geometry: &Tensor) -> Result<Tensor> {
        let g = run_blocks(&self.geometry_blocks, self.geometry_embed.forward(geometry)?)?;
        Ok(g.mean(1)?)
    }

    /// Fisher parameters `(B, 9)` row-major and translations `(B, 3)`.
    pub fn decode(&self, f_ta: &Tensor, f_ga: &Tensor) -> Result<(Tensor, Tensor)> {
        let z = self.head_norm.forward(&Tensor::cat(&[f_ta, f_ga], D::Minus1)?)?;
        Ok(((self.rotation_head.forward(&z)? * FISHER_SCALE)?, self.translation_head.forward(&z)?))
    }

    pub fn forward(&self, batch: &Batch) -> Result<(Tensor, Tensor)> {
        let fo = self.flow_encode(batch)?;
        let motion = flow3d(&batch.depths, &fo.flow, &batch.intrinsics)?;
        let f_ta = self.time_aware_flow_feature(&fo.features, &batch.time, &motion)?;
        let f_ga = self.geometry_context_encode(&batch.geometry)?;
        self.decode(&f_ta, &f_ga)
    }

    pub fn predict(&self, batch: &Batch) -> Result<Vec<EgomotionPrediction>> {
        let (f, t) = self.forward(batch)?;
        decode_predictions(&f, &t)
    }
}

/// Rotation from each Fisher parameter via its mode.
pub fn decode_predictions(f: &Tensor, t: &Tensor) -> Result<Vec<EgomotionPrediction>> {
    let fv = f.flatten_all()?.to_vec1::<f32>()?;
    let tv = t.flatten_all()?.to_vec1::<f32>()?;
    fv.chunks_exact(9)
        .zip(tv.chunks_exact(3))
        .map(|(f, t)| {
            let fisher = Matrix3::from_row_slice(&f.iter().map(|x| *x as f64).collect::<Vec<_>>());
            let mode = fisher_mode(&fisher)?;
            Ok(EgomotionPrediction {
                fisher,
                rotation: mode.rotation,
                translation: Vector3::new(t[0] as f64, t[1] as f64, t[2] as f64),
                degenerate: mode.degenerate,
            })
        })
        .collect()
}
