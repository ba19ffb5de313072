//! Multi-rate training.
//!
//! Every iteration draws one rate from the configured set, a batch of pairs
//! at that rate, and takes one clipped AdamW step on
//! `λ_rot · NLL_MF(F; R_gt) + λ_trans · ‖t̂ − t‖²`.

use std::io::Write;

use candle_core::{Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tavo_core::fisher::fisher_nll;
use tavo_core::synth::{perturb_priors, FramePair, Sequence};
use tavo_core::PoseSE3;

use crate::config::ModelConfig;
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::network::EgomotionNet;
use crate::ops::fisher_nll_loss;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RotationLoss {
    /// Matrix-Fisher negative log-likelihood.
    Fisher,
    /// `−tr(R_gtᵀ F) + λ ‖F‖²_F`; cheap fallback.
    TraceSurrogate { reg: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    /// Training rates in Hz; each must be `base_rate / k` for integer `k`.
    pub frequencies: Vec<f64>,
    pub base_rate: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    /// Cosine decay from `learning_rate` to this fraction of it over the
    /// run; 1 keeps the rate constant.
    pub final_lr_fraction: f64,
    pub seed: u64,
    pub rotation_weight: f64,
    pub translation_weight: f64,
    pub rotation_loss: RotationLoss,
    /// Relative per-pixel depth noise applied to training inputs.
    pub depth_noise: f64,
    /// Relative focal-length noise applied to training inputs.
    pub intrinsics_noise: f64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            frequencies: vec![12.0, 6.0, 4.0],
            base_rate: 12.0,
            batch_size: 8,
            iterations: 10_000,
            learning_rate: 3e-4,
            weight_decay: 1e-4,
            grad_clip: 1.0,
            final_lr_fraction: 0.05,
            seed: 2023,
            rotation_weight: 1.0,
            translation_weight: 1.0,
            rotation_loss: RotationLoss::Fisher,
            depth_noise: 0.0,
            intrinsics_noise: 0.0,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.frequencies.is_empty() {
            return Err(Error::config("frequency set is empty"));
        }
        self.skips()?;
        let positive = [self.base_rate, self.learning_rate, self.grad_clip];
        if positive.iter().any(|x| !(*x > 0.0) || !x.is_finite()) || self.batch_size == 0 {
            return Err(Error::config("base rate, learning rate, clip norm and batch size must be positive"));
        }
        if !(self.final_lr_fraction > 0.0 && self.final_lr_fraction <= 1.0) {
            return Err(Error::config("final learning-rate fraction must be in (0, 1]"));
        }
        let nonneg = [self.weight_decay, self.rotation_weight, self.translation_weight, self.depth_noise, self.intrinsics_noise];
        if nonneg.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
            return Err(Error::config("weights, decay and noise levels must be non-negative"));
        }
        Ok(())
    }

    /// Learning rate at iteration `it`.
    pub fn learning_rate_at(&self, it: usize) -> f64 {
        let f = self.final_lr_fraction;
        let progress = if self.iterations > 1 { it as f64 / (self.iterations - 1) as f64 } else { 0.0 };
        self.learning_rate * (f + (1.0 - f) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
    }

    /// Frame-skip factor of every training rate.
    pub fn skips(&self) -> Result<Vec<usize>> {
        self.frequencies
            .iter()
            .map(|f| {
                let k = self.base_rate / f;
                if !(*f > 0.0) || (k - k.round()).abs() > 1e-9 || k.round() < 1.0 {
                    return Err(Error::config(format!("{f} Hz is not {} Hz divided by an integer", self.base_rate)));
                }
                Ok(k.round() as usize)
            })
            .collect()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: TrainConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("train config serializes")
    }
}

/// Loss components for one prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub rotation: f64,
    pub translation: f64,
}

/// Scalar loss for one prediction and the gradient with respect to `F`.
pub fn pose_loss(
    fisher: &Matrix3<f64>,
    translation: &Vector3<f64>,
    gt: &PoseSE3,
    rotation_weight: f64,
    translation_weight: f64,
) -> Result<(LossParts, Matrix3<f64>)> {
    let (rot, grad) = fisher_nll(fisher, &gt.rotation)?;
    let trans = (translation - gt.translation).norm_squared();
    Ok((
        LossParts {
            total: rotation_weight * rot + translation_weight * trans,
            rotation: rot,
            translation: trans,
        },
        grad * rotation_weight,
    ))
}

/// Batch-mean loss tensor plus its two components.
pub fn batch_loss(f: &Tensor, t: &Tensor, batch: &Batch, cfg: &TrainConfig) -> Result<(Tensor, f64, f64)> {
    let rot = match cfg.rotation_loss {
        RotationLoss::Fisher => fisher_nll_loss(f, &batch.rotation_target)?.mean_all()?,
        RotationLoss::TraceSurrogate { reg } => {
            let tr = (f * &batch.rotation_target)?.sum(1)?;
            ((f.sqr()?.sum(1)? * reg)? - tr)?.mean_all()?
        }
    };
    let trans = (t - &batch.translation_target)?.sqr()?.sum(1)?.mean_all()?;
    let total = ((&rot * cfg.rotation_weight)? + (&trans * cfg.translation_weight)?)?;
    Ok((total, rot.to_scalar::<f32>()? as f64, trans.to_scalar::<f32>()? as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: usize,
    pub loss: f64,
    pub rotation: f64,
    pub translation: f64,
    pub grad_norm: f64,
    pub clipped_norm: f64,
    pub learning_rate: f64,
    pub frequency: f64,
    pub skip: usize,
}

/// Global gradient norm over `vars`, then rescales so it is at most `clip`.
/// Returns the norms before and after clipping.
pub fn clip_gradients(grads: &mut candle_core::backprop::GradStore, vars: &[Var], clip: f64) -> Result<(f64, f64)> {
    let mut sq = 0.0;
    for v in vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            sq += g.sqr()?.sum_all()?.to_scalar::<f32>()? as f64;
        }
    }
    let norm = sq.sqrt();
    if !norm.is_finite() || norm <= clip {
        return Ok((norm, norm));
    }
    let scale = clip / norm;
    for v in vars {
        if let Some(g) = grads.remove(v.as_tensor()) {
            grads.insert(v.as_tensor(), (g * scale)?);
        }
    }
    Ok((norm, norm * scale))
}

/// Training pairs: every sequence must be long enough for the largest skip.
pub struct TrainingData<'a> {
    pub sequences: &'a [Sequence],
}

impl TrainingData<'_> {
    fn check(&self, skips: &[usize]) -> Result<()> {
        let kmax = *skips.iter().max().unwrap();
        if self.sequences.is_empty() || self.sequences.iter().any(|s| s.len() <= kmax) {
            return Err(Error::config(format!("every training sequence needs more than {kmax} frames")));
        }
        Ok(())
    }

    fn draw(&self, k: usize, rng: &mut ChaCha8Rng) -> Result<FramePair> {
        let seq = &self.sequences[rng.random_range(0..self.sequences.len())];
        let i = rng.random_range(0..seq.len() - k);
        Ok(seq.pair(i, k)?)
    }
}

pub struct TrainOutcome {
    pub net: EgomotionNet,
    pub log: Vec<LogRecord>,
}

/// Trains from scratch; network initialization and data order derive from
/// `cfg.seed` only.
pub fn train(cfg: &TrainConfig, data: &TrainingData, mut log_sink: Option<&mut dyn Write>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let skips = cfg.skips()?;
    data.check(&skips)?;
    let net = EgomotionNet::new(&cfg.model, cfg.seed)?;
    let vars = net.params().vars();
    let mut opt = AdamW::new(
        vars.clone(),
        ParamsAdamW {
            lr: cfg.learning_rate,
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let device = net.params().device().clone();
    let mut log = Vec::new();
    for it in 0..cfg.iterations {
        opt.set_learning_rate(cfg.learning_rate_at(it));
        let batch_seed: u64 = rng.random();
        let mut brng = ChaCha8Rng::seed_from_u64(batch_seed);
        let j = brng.random_range(0..skips.len());
        let k = skips[j];
        let pairs = (0..cfg.batch_size)
            .map(|_| {
                let p = data.draw(k, &mut brng)?;
                if cfg.depth_noise > 0.0 || cfg.intrinsics_noise > 0.0 {
                    Ok(perturb_priors(&p, cfg.depth_noise, cfg.intrinsics_noise, &mut brng)?)
                } else {
                    Ok(p)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let expected_dt = k as f64 / cfg.base_rate;
        for p in &pairs {
            assert!((p.delta_t - expected_dt).abs() < 1e-12, "batch Δt {} but sampled k/f₀ = {expected_dt}", p.delta_t);
        }
        let refs: Vec<&FramePair> = pairs.iter().collect();
        let batch = Batch::from_pairs(&refs, &cfg.model, &device)?;
        let (f, t) = net.forward(&batch)?;
        let (loss, rot, trans) = batch_loss(&f, &t, &batch, cfg)?;
        let value = loss.to_scalar::<f32>()? as f64;
        if !value.is_finite() {
            return Err(Error::NonFinite {
                iteration: it,
                batch_seed,
                rotation: rot,
                translation: trans,
            });
        }
        let mut grads = loss.backward()?;
        let (grad_norm, clipped_norm) = clip_gradients(&mut grads, &vars, cfg.grad_clip)?;
        assert!(
            !grad_norm.is_finite() || clipped_norm <= cfg.grad_clip * (1.0 + 1e-5),
            "clipped gradient norm {clipped_norm} above bound"
        );
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite {
                iteration: it,
                batch_seed,
                rotation: rot,
                translation: trans,
            });
        }
        opt.step(&grads)?;
        let rec = LogRecord {
            iteration: it,
            loss: value,
            rotation: rot,
            translation: trans,
            grad_norm,
            clipped_norm,
            learning_rate: cfg.learning_rate_at(it),
            frequency: cfg.frequencies[j],
            skip: k,
        };
        if let Some(w) = log_sink.as_deref_mut() {
            if cfg.log_every > 0 && (it % cfg.log_every == 0 || it + 1 == cfg.iterations) {
                writeln!(w, "{}", serde_json::to_string(&rec).expect("log record serializes"))?;
            }
        }
        if cfg.log_every > 0 && it % cfg.log_every == 0 {
            log::info!("iter {it}: loss {value:.4} (rot {rot:.4}, trans {trans:.4}) |g| {grad_norm:.3} @ {} Hz", cfg.frequencies[j]);
        }
        log.push(rec);
    }
    Ok(TrainOutcome { net, log })
}
