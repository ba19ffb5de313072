//! Time-gap encoding and per-channel time conditioning.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_FREQUENCY_SCALES: usize = 8;

/// Angular frequency of scale `i`: `π · 2^i`.
#[inline]
pub fn frequency(i: usize) -> f64 {
    std::f64::consts::PI * (1u64 << i) as f64
}

pub fn frequencies(scales: usize) -> Vec<f64> {
    (0..scales).map(frequency).collect()
}

/// `[Δt, sin(ω₀Δt)…sin(ω_{K−1}Δt), cos(ω₀Δt)…cos(ω_{K−1}Δt)]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeEncoding {
    pub delta_t: f64,
    pub scales: usize,
    pub vector: Vec<f64>,
}

impl TimeEncoding {
    pub fn dim(scales: usize) -> usize {
        1 + 2 * scales
    }
}

pub fn encode_time(delta_t: f64, scales: usize) -> Result<TimeEncoding> {
    if !(delta_t > 0.0) || !delta_t.is_finite() {
        return Err(Error::domain(format!("time gap must be positive, got {delta_t}")));
    }
    if scales == 0 || scales > 52 {
        return Err(Error::domain(format!("frequency scale count {scales} out of range")));
    }
    let mut vector = Vec::with_capacity(TimeEncoding::dim(scales));
    vector.push(delta_t);
    vector.extend((0..scales).map(|i| (frequency(i) * delta_t).sin()));
    vector.extend((0..scales).map(|i| (frequency(i) * delta_t).cos()));
    Ok(TimeEncoding {
        delta_t,
        scales,
        vector,
    })
}

/// Time gap of a pair sampled every `skip` frames from a `base_rate` stream.
pub fn delta_t_for(skip: usize, base_rate: f64) -> f64 {
    skip as f64 / base_rate
}

/// Per-channel scale `α` and shift `β`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionParams {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

/// Dense affine map `y = W x + b`, `W` stored row-major `out×in`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMap {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl AffineMap {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        AffineMap {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.inputs {
            return Err(Error::shape(format!(
                "affine map expects {} inputs, got {}",
                self.inputs,
                x.len()
            )));
        }
        Ok((0..self.outputs)
            .map(|o| {
                let row = &self.weight[o * self.inputs..(o + 1) * self.inputs];
                row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>() + self.bias[o]
            })
            .collect())
    }
}

/// The pair of affine maps producing `α` and `β` from a time encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeCondition {
    pub alpha: AffineMap,
    pub beta: AffineMap,
}

impl TimeCondition {
    /// Zero maps: conditioning starts as the identity.
    pub fn zeros(scales: usize, channels: usize) -> Self {
        let d = TimeEncoding::dim(scales);
        TimeCondition {
            alpha: AffineMap::zeros(d, channels),
            beta: AffineMap::zeros(d, channels),
        }
    }

    pub fn params(&self, te: &TimeEncoding) -> Result<ConditionParams> {
        Ok(ConditionParams {
            alpha: self.alpha.apply(&te.vector)?,
            beta: self.beta.apply(&te.vector)?,
        })
    }
}

/// Channel-last feature map `H_F×W_F×C_F`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

/// `(1 + α) ⊙ F + β`, broadcast over spatial positions.
pub fn condition_features(features: &FeatureMap, params: &ConditionParams) -> Result<FeatureMap> {
    let c = features.channels;
    if params.alpha.len() != c || params.beta.len() != c {
        return Err(Error::shape(format!(
            "features have {c} channels, conditioning has {}/{}",
            params.alpha.len(),
            params.beta.len()
        )));
    }
    if features.data.len() != features.height * features.width * c {
        return Err(Error::shape("feature map data length does not match its shape"));
    }
    let data = features
        .data
        .chunks_exact(c)
        .flat_map(|px| {
            px.iter()
                .zip(params.alpha.iter().zip(&params.beta))
                .map(|(f, (a, b))| (1.0 + a) * f + b)
        })
        .collect();
    Ok(FeatureMap {
        data,
        ..features.clone()
    })
}
