//! Network inputs assembled from frame pairs.

use candle_core::{Device, Tensor};
use nalgebra::Vector3;
use tavo_core::flow3d::DepthMap;
use tavo_core::synth::FramePair;
use tavo_core::temporal::encode_time;
use tavo_core::{CameraIntrinsics, PoseSE3};

use crate::config::{FlowProvider, ModelConfig};
use crate::error::{Error, Result};

/// Depths (and depth-scaled rays) are divided by this before embedding.
pub const DEPTH_NORM: f64 = 10.0;

/// Per-pixel geometry tokens `[r, M, D]` in double precision.
#[derive(Debug, Clone, PartialEq)]
pub struct GeometryTokens {
    pub width: usize,
    pub height: usize,
    /// `r(u, v) = K⁻¹ [u, v, 1]ᵀ`, z component 1.
    pub rays: Vec<Vector3<f64>>,
    /// `M(u, v) = D(u, v) · r(u, v)`, meters.
    pub points: Vec<Vector3<f64>>,
    pub depth: Vec<f64>,
}

impl GeometryTokens {
    pub fn build(k: &CameraIntrinsics, depth: &DepthMap) -> Result<Self> {
        if (k.width, k.height) != (depth.width, depth.height) {
            return Err(tavo_core::Error::Shape(format!(
                "intrinsics for {}x{}, depth is {}x{}",
                k.width, k.height, depth.width, depth.height
            ))
            .into());
        }
        let (w, h) = (depth.width, depth.height);
        let rays: Vec<Vector3<f64>> = (0..w * h).map(|i| k.ray((i % w) as f64, (i / w) as f64)).collect();
        let points = rays.iter().zip(&depth.data).map(|(r, d)| r * *d).collect();
        Ok(GeometryTokens {
            width: w,
            height: h,
            rays,
            points,
            depth: depth.data.clone(),
        })
    }

    /// Channel-first `7×H×W` network input with depths normalized.
    pub fn channels(&self) -> Vec<f32> {
        let n = self.width * self.height;
        let mut out = vec![0f32; 7 * n];
        for i in 0..n {
            for c in 0..3 {
                out[c * n + i] = self.rays[i][c] as f32;
                out[(3 + c) * n + i] = (self.points[i][c] / DEPTH_NORM) as f32;
            }
            out[6 * n + i] = (self.depth[i] / DEPTH_NORM) as f32;
        }
        out
    }
}

/// One mini-batch of network inputs and pose labels.
pub struct Batch {
    pub size: usize,
    pub flow: Option<Tensor>,
    pub images: Option<Tensor>,
    pub depths: Tensor,
    pub intrinsics: Tensor,
    pub geometry: Tensor,
    pub time: Tensor,
    pub delta_t: Vec<f64>,
    pub rotation_target: Tensor,
    pub translation_target: Tensor,
    pub poses: Vec<PoseSE3>,
}

impl Batch {
    pub fn from_pairs(pairs: &[&FramePair], cfg: &ModelConfig, device: &Device) -> Result<Self> {
        let b = pairs.len();
        if b == 0 {
            return Err(Error::config("empty batch"));
        }
        let (h, w) = (cfg.height, cfg.width);
        let n = h * w;
        let mut flow = Vec::with_capacity(b * 2 * n);
        let mut images = Vec::new();
        let mut depths = Vec::with_capacity(b * 2 * n);
        let mut intr = Vec::with_capacity(b * 4);
        let mut geometry = Vec::with_capacity(b * 7 * n);
        let mut time = Vec::with_capacity(b * cfg.time_dim());
        let mut rot = Vec::with_capacity(b * 9);
        let mut trans = Vec::with_capacity(b * 3);
        for p in pairs {
            let k = &p.intrinsics;
            if (k.width, k.height) != (w, h) || (p.image1.width, p.image1.height) != (p.image2.width, p.image2.height) {
                return Err(tavo_core::Error::Shape(format!(
                    "pair is {}x{}, model expects {w}x{h}",
                    k.width, k.height
                ))
                .into());
            }
            flow.extend(p.flow.dx.iter().chain(&p.flow.dy).map(|x| *x as f32));
            if cfg.flow_provider == FlowProvider::Learned {
                for img in [&p.image1, &p.image2] {
                    for c in 0..3 {
                        images.extend((0..n).map(|i| img.data[3 * i + c]));
                    }
                }
            }
            depths.extend(p.depth1.data.iter().chain(&p.depth2.data).map(|x| *x as f32));
            intr.extend([k.fu, k.fv, k.cu, k.cv].map(|x| x as f32));
            geometry.extend(GeometryTokens::build(k, &p.depth1)?.channels());
            time.extend(encode_time(p.delta_t, cfg.frequency_scales)?.vector.iter().map(|x| *x as f32));
            rot.extend(p.pose.rotation.transpose().iter().map(|x| *x as f32));
            trans.extend(p.pose.translation.iter().map(|x| *x as f32));
        }
        let t = |v: Vec<f32>, s: &[usize]| Tensor::from_vec(v, s, device);
        Ok(Batch {
            size: b,
            flow: Some(t(flow, &[b, 2, h, w])?),
            images: if images.is_empty() {
                None
            } else {
                Some(t(images, &[b, 6, h, w])?)
            },
            depths: t(depths, &[b, 2, h, w])?,
            intrinsics: t(intr, &[b, 4])?,
            geometry: t(geometry, &[b, 7, h, w])?,
            time: t(time, &[b, cfg.time_dim()])?,
            delta_t: pairs.iter().map(|p| p.delta_t).collect(),
            rotation_target: t(rot, &[b, 9])?,
            translation_target: t(trans, &[b, 3])?,
            poses: pairs.iter().map(|p| p.pose).collect(),
        })
    }
}
