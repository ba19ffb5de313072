//! Two-frame inference over sequences and trajectory-level evaluation.

use serde::{Deserialize, Serialize};
use tavo_core::geometry::accumulate;
use tavo_core::metrics::{evaluate, EvalOptions, EvalReport};
use tavo_core::synth::{FramePair, Sequence};
use tavo_core::{PoseSE3, Trajectory};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::network::{EgomotionNet, EgomotionPrediction};

pub const INFER_BATCH: usize = 16;

pub fn infer_pairs(net: &EgomotionNet, pairs: &[FramePair]) -> Result<Vec<EgomotionPrediction>> {
    let device = net.params().device().clone();
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(INFER_BATCH) {
        let refs: Vec<&FramePair> = chunk.iter().collect();
        out.extend(net.predict(&Batch::from_pairs(&refs, &net.config, &device)?)?);
    }
    Ok(out)
}

/// Timestamps of a chain of consecutive pairs: frame index over base rate.
fn chain_timestamps(pairs: &[FramePair]) -> Result<Vec<f64>> {
    let Some(first) = pairs.first() else {
        return Err(Error::config("no pairs to accumulate"));
    };
    for w in pairs.windows(2) {
        if w[0].frames.1 != w[1].frames.0 {
            return Err(Error::config(format!(
                "pairs {:?} and {:?} are not consecutive",
                w[0].frames, w[1].frames
            )));
        }
    }
    let k = (first.frames.1 - first.frames.0) as f64;
    let step = first.delta_t / k;
    let mut ts = vec![first.frames.0 as f64 * step];
    ts.extend(pairs.iter().map(|p| p.frames.1 as f64 * step));
    Ok(ts)
}

pub fn ground_truth_trajectory(pairs: &[FramePair]) -> Result<Trajectory> {
    let poses: Vec<PoseSE3> = pairs.iter().map(|p| p.pose).collect();
    Ok(accumulate(&poses, &chain_timestamps(pairs)?)?)
}

/// Predicted relative poses chained into an anchored trajectory.
pub fn infer_trajectory(net: &EgomotionNet, pairs: &[FramePair]) -> Result<Trajectory> {
    let ts = chain_timestamps(pairs)?;
    let rel: Vec<PoseSE3> = infer_pairs(net, pairs)?
        .into_iter()
        .map(|p| PoseSE3 {
            rotation: p.rotation,
            translation: p.translation,
        })
        .collect();
    Ok(accumulate(&rel, &ts)?)
}

/// Mean metrics over several sequences at one frame skip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub skip: usize,
    pub rate: f64,
    pub t_err: f64,
    pub r_err: f64,
    pub ate: f64,
    pub s_err: f64,
    pub sequences: Vec<EvalReport>,
}

pub fn evaluate_sequences(net: &EgomotionNet, sequences: &[Sequence], skip: usize, opts: &EvalOptions) -> Result<RateReport> {
    if sequences.is_empty() {
        return Err(Error::config("no evaluation sequences"));
    }
    let mut reports = Vec::with_capacity(sequences.len());
    for seq in sequences {
        let pairs = seq.pairs(skip)?;
        let pred = infer_trajectory(net, &pairs)?;
        let gt = ground_truth_trajectory(&pairs)?;
        reports.push(evaluate(&pred, &gt, opts)?);
    }
    let mean = |f: fn(&EvalReport) -> f64| reports.iter().map(f).sum::<f64>() / reports.len() as f64;
    Ok(RateReport {
        skip,
        rate: sequences[0].spec.motion.base_rate / skip as f64,
        t_err: mean(|r| r.t_err),
        r_err: mean(|r| r.r_err),
        ate: mean(|r| r.ate),
        s_err: mean(|r| r.s_err),
        sequences: reports,
    })
}
