//! Trajectory metrics: relative drift over fixed-length segments (t_err,
//! r_err), absolute trajectory error after alignment (ATE) and per-step scale
//! error (s_err).

use std::fmt;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rotation_angle, PoseSE3, Trajectory};

/// Guard on ground-truth step lengths in the relative scale error.
pub const SCALE_EPS: f64 = 1e-6;

/// Segment lengths (meters) suited to short synthetic sequences.
pub const DESK_LENGTHS: [f64; 4] = [10.0, 20.0, 30.0, 40.0];

/// Segment lengths of the standard odometry benchmark protocol.
pub const KITTI_LENGTHS: [f64; 8] = [100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignMode {
    /// Rotation and translation only.
    #[default]
    Rigid,
    /// Rotation, translation and scale; diagnostic only.
    Sim3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleErrorMode {
    /// `|‖t̂‖ − ‖t‖| / max(‖t‖, ε)`.
    #[default]
    Rel,
    /// `|‖t̂‖ − ‖t‖|` in meters.
    Abs,
}

#[derive(Debug, Clone)]
pub struct Alignment {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub scale: f64,
    pub aligned: Trajectory,
}

impl Alignment {
    pub fn transform(&self) -> PoseSE3 {
        PoseSE3 {
            rotation: self.rotation,
            translation: self.translation,
        }
    }
}

fn check_pair(pred: &Trajectory, gt: &Trajectory, min_len: usize) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::domain(format!(
            "trajectory lengths differ: {} predicted vs {} ground truth",
            pred.len(),
            gt.len()
        )));
    }
    if pred.len() < min_len {
        return Err(Error::domain(format!("need at least {min_len} poses, got {}", pred.len())));
    }
    if let Some(i) = pred
        .timestamps()
        .iter()
        .zip(gt.timestamps())
        .position(|(a, b)| (a - b).abs() > 1e-6)
    {
        return Err(Error::domain(format!("timestamps differ at index {i}")));
    }
    Ok(())
}

/// Least-squares alignment of predicted positions onto ground truth.
pub fn align_trajectories(pred: &Trajectory, gt: &Trajectory, mode: AlignMode) -> Result<Alignment> {
    check_pair(pred, gt, 2)?;
    let p = pred.positions();
    let g = gt.positions();
    let n = p.len() as f64;
    let mp = p.iter().sum::<Vector3<f64>>() / n;
    let mg = g.iter().sum::<Vector3<f64>>() / n;
    let var_p = p.iter().map(|x| (x - mp).norm_squared()).sum::<f64>() / n;
    let var_g = g.iter().map(|x| (x - mg).norm_squared()).sum::<f64>() / n;

    let (rotation, scale) = if var_p < 1e-24 || var_g < 1e-24 {
        (Matrix3::identity(), 1.0)
    } else {
        let cov = p
            .iter()
            .zip(&g)
            .map(|(a, b)| (b - mg) * (a - mp).transpose())
            .sum::<Matrix3<f64>>()
            / n;
        let svd = cov.svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let d = (u.determinant() * vt.determinant()).signum();
        let s = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
        let r = u * s * vt;
        let scale = match mode {
            AlignMode::Rigid => 1.0,
            AlignMode::Sim3 => (Matrix3::from_diagonal(&svd.singular_values) * s).trace() / var_p,
        };
        (r, scale)
    };
    let translation = mg - rotation * mp * scale;
    let poses = pred
        .poses()
        .iter()
        .map(|q| PoseSE3 {
            rotation: rotation * q.rotation,
            translation: rotation * q.translation * scale + translation,
        })
        .collect();
    Ok(Alignment {
        rotation,
        translation,
        scale,
        aligned: Trajectory::new(poses, pred.timestamps().to_vec())?,
    })
}

/// RMS position error after alignment, in meters.
pub fn ate(pred: &Trajectory, gt: &Trajectory, mode: AlignMode) -> Result<f64> {
    let al = align_trajectories(pred, gt, mode)?;
    let sq: f64 = al
        .aligned
        .poses()
        .iter()
        .zip(gt.poses())
        .map(|(a, b)| (a.translation - b.translation).norm_squared())
        .sum();
    Ok((sq / gt.len() as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentStats {
    pub length: f64,
    pub count: usize,
    /// Percent.
    pub t_err: f64,
    /// Degrees per 100 m.
    pub r_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelativeErrors {
    pub t_err: f64,
    pub r_err: f64,
    pub segments: Vec<SegmentStats>,
}

/// Segment drift averaged over every start frame and every segment length.
///
/// A segment starting at `i` ends at the first frame whose ground-truth path
/// length from `i` reaches `L`.
pub fn kitti_relative_errors(pred: &Trajectory, gt: &Trajectory, lengths: &[f64]) -> Result<RelativeErrors> {
    check_pair(pred, gt, 2)?;
    if lengths.is_empty() || lengths.iter().any(|l| !(*l > 0.0)) {
        return Err(Error::domain("segment lengths must be positive and non-empty"));
    }
    let dist = gt.path_lengths();
    let total = *dist.last().unwrap();
    let (pp, gp) = (pred.poses(), gt.poses());

    let mut segments = Vec::new();
    let (mut t_sum, mut r_sum, mut count) = (0.0, 0.0, 0usize);
    for &len in lengths {
        let (mut ts, mut rs, mut c) = (0.0, 0.0, 0usize);
        let mut end = 0;
        for start in 0..gp.len() {
            // `end` is monotone in `start`
            end = end.max(start);
            while end < gp.len() && dist[end] - dist[start] < len {
                end += 1;
            }
            if end == gp.len() {
                break;
            }
            let gt_rel = gp[start].inverse().compose(&gp[end]);
            let pr_rel = pp[start].inverse().compose(&pp[end]);
            let err = gt_rel.inverse().compose(&pr_rel);
            ts += err.translation.norm() / len;
            rs += rotation_angle(&err.rotation) / len;
            c += 1;
        }
        if c > 0 {
            segments.push(SegmentStats {
                length: len,
                count: c,
                t_err: ts / c as f64 * 100.0,
                r_err: rs.to_degrees() / c as f64 * 100.0,
            });
            t_sum += ts;
            r_sum += rs;
            count += c;
        }
    }
    if count == 0 {
        let usable = lengths.iter().copied().filter(|l| *l <= total).collect();
        return Err(Error::NoSubsequences { usable });
    }
    Ok(RelativeErrors {
        t_err: t_sum / count as f64 * 100.0,
        r_err: r_sum.to_degrees() / count as f64 * 100.0,
        segments,
    })
}

/// Mean per-step discrepancy of translation magnitudes.
pub fn scale_error(pred_rel: &[PoseSE3], gt_rel: &[PoseSE3], mode: ScaleErrorMode) -> Result<f64> {
    if pred_rel.len() != gt_rel.len() {
        return Err(Error::domain(format!(
            "{} predicted steps vs {} ground-truth steps",
            pred_rel.len(),
            gt_rel.len()
        )));
    }
    if gt_rel.is_empty() {
        return Err(Error::domain("scale error needs at least one step"));
    }
    let sum: f64 = pred_rel
        .iter()
        .zip(gt_rel)
        .map(|(p, g)| {
            let (np, ng) = (p.translation.norm(), g.translation.norm());
            match mode {
                ScaleErrorMode::Rel => (np - ng).abs() / ng.max(SCALE_EPS),
                ScaleErrorMode::Abs => (np - ng).abs(),
            }
        })
        .sum();
    Ok(sum / gt_rel.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub lengths: Vec<f64>,
    pub s_err_mode: ScaleErrorMode,
    pub align: AlignMode,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            lengths: DESK_LENGTHS.to_vec(),
            s_err_mode: ScaleErrorMode::Rel,
            align: AlignMode::Rigid,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Percent.
    pub t_err: f64,
    /// Degrees per 100 m.
    pub r_err: f64,
    /// Meters, RMS.
    pub ate: f64,
    pub s_err: f64,
    pub s_err_mode: ScaleErrorMode,
    pub align: AlignMode,
    pub segments: Vec<SegmentStats>,
}

pub fn evaluate(pred: &Trajectory, gt: &Trajectory, opts: &EvalOptions) -> Result<EvalReport> {
    let rel = kitti_relative_errors(pred, gt, &opts.lengths)?;
    let ate = ate(pred, gt, opts.align)?;
    let s_err = scale_error(&pred.relative_poses(), &gt.relative_poses(), opts.s_err_mode)?;
    Ok(EvalReport {
        t_err: rel.t_err,
        r_err: rel.r_err,
        ate,
        s_err,
        s_err_mode: opts.s_err_mode,
        align: opts.align,
        segments: rel.segments,
    })
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>10} {:>12} {:>10} {:>8}", "t_err(%)", "r_err(°/100m)", "ATE(m)", "s_err")?;
        writeln!(f, "{:>10.4} {:>12.4} {:>10.4} {:>8.4}", self.t_err, self.r_err, self.ate, self.s_err)?;
        writeln!(f)?;
        writeln!(f, "{:>8} {:>6} {:>10} {:>12}", "len(m)", "count", "t_err(%)", "r_err(°/100m)")?;
        for s in &self.segments {
            writeln!(f, "{:>8.1} {:>6} {:>10.4} {:>12.4}", s.length, s.count, s.t_err, s.r_err)?;
        }
        Ok(())
    }
}
