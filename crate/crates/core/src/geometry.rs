//! Pinhole camera model, rigid-body poses and trajectory accumulation.
//!
//! Pixel coordinates are `(u, v) = (column, row)` with the origin at the
//! center of the top-left pixel. Camera frames are x right, y down, z forward.
//! All angles are radians.

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Orthonormality / determinant drift above which rotations are re-projected.
pub const ROTATION_DRIFT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fu: f64,
    pub fv: f64,
    pub cu: f64,
    pub cv: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fu: f64, fv: f64, cu: f64, cv: f64, width: usize, height: usize) -> Result<Self> {
        let k = CameraIntrinsics {
            fu,
            fv,
            cu,
            cv,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fu > 0.0 && self.fv > 0.0 && self.fu.is_finite() && self.fv.is_finite()) {
            return Err(Error::domain(format!(
                "focal lengths must be positive, got fu={} fv={}",
                self.fu, self.fv
            )));
        }
        if !(self.cu > 0.0 && self.cu < self.width as f64 && self.cv > 0.0 && self.cv < self.height as f64)
        {
            return Err(Error::domain(format!(
                "principal point ({}, {}) outside the {}x{} image",
                self.cu, self.cv, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Viewing ray `K⁻¹ [u, v, 1]ᵀ`, normalized so that its z component is 1.
    #[inline]
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cu) / self.fu, (v - self.cv) / self.fv, 1.0)
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u <= (self.width - 1) as f64 && v <= (self.height - 1) as f64
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fu, 0.0, self.cu, 0.0, self.fv, self.cv, 0.0, 0.0, 1.0)
    }
}

/// Lifts pixel `(u, v)` at metric `depth` to a camera-frame point.
pub fn back_project(u: f64, v: f64, depth: f64, k: &CameraIntrinsics) -> Result<Vector3<f64>> {
    if !(depth > 0.0) {
        return Err(Error::domain(format!("depth must be positive, got {depth}")));
    }
    if !k.contains(u, v) {
        return Err(Error::domain(format!("pixel ({u}, {v}) outside image")));
    }
    Ok(k.ray(u, v) * depth)
}

/// Projects a camera-frame point, returning `(u, v, depth)`.
pub fn project(point: &Vector3<f64>, k: &CameraIntrinsics) -> Result<(f64, f64, f64)> {
    let z = point.z;
    if !(z > 0.0) {
        return Err(Error::BehindCamera(z));
    }
    Ok((k.fu * point.x / z + k.cu, k.fv * point.y / z + k.cv, z))
}

/// Rigid transform `x ↦ R x + t`, translation in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseSE3 {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for PoseSE3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl PoseSE3 {
    pub fn identity() -> Self {
        PoseSE3 {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose, rejecting matrices that are not rotations within `tol`
    /// and re-projecting accepted ones that drift beyond [`ROTATION_DRIFT_TOL`].
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>, tol: f64) -> Result<Self> {
        let drift = rotation_drift(&rotation);
        if !(drift <= tol) || !translation.iter().all(|x| x.is_finite()) {
            return Err(Error::domain(format!(
                "matrix is not a rotation (drift {drift:.3e} > {tol:.1e})"
            )));
        }
        let mut p = PoseSE3 {
            rotation,
            translation,
        };
        p.renormalize();
        Ok(p)
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        PoseSE3 {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    /// `(R_a R_b, R_a t_b + t_a)`.
    pub fn compose(&self, other: &PoseSE3) -> PoseSE3 {
        let mut out = PoseSE3 {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        };
        out.renormalize();
        out
    }

    pub fn inverse(&self) -> PoseSE3 {
        let rt = self.rotation.transpose();
        PoseSE3 {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Rotation angle of `R` in radians.
    pub fn angle(&self) -> f64 {
        rotation_angle(&self.rotation)
    }

    pub fn drift(&self) -> f64 {
        rotation_drift(&self.rotation)
    }

    fn renormalize(&mut self) {
        if rotation_drift(&self.rotation) > ROTATION_DRIFT_TOL {
            self.rotation = nearest_rotation(&self.rotation);
        }
    }
}

/// Max of `‖RᵀR − I‖_F` and `|det R − 1|`.
pub fn rotation_drift(r: &Matrix3<f64>) -> f64 {
    let ortho = (r.transpose() * r - Matrix3::identity()).norm();
    let det = (r.determinant() - 1.0).abs();
    ortho.max(det)
}

/// Nearest rotation in Frobenius norm: `U diag(1, 1, det(U Vᵀ)) Vᵀ`.
pub fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let vt = svd.v_t.expect("svd v_t");
    let d = (u * vt).determinant().signum();
    u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * vt
}

/// Geodesic angle of a rotation matrix, robust near 0 and π.
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let c = (r.trace() - 1.0) / 2.0;
    let s = 0.5
        * Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]).norm();
    s.atan2(c.clamp(-1.0, 1.0))
}

/// Rotation exp map of an axis-angle vector (Rodrigues).
pub fn so3_exp(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta = w.norm();
    let k = w.cross_matrix();
    if theta < 1e-12 {
        return Matrix3::identity() + k;
    }
    let (s, c) = theta.sin_cos();
    Matrix3::identity() + k * (s / theta) + k * k * ((1.0 - c) / (theta * theta))
}

pub fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Absolute world-from-camera poses with timestamps in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    poses: Vec<PoseSE3>,
    timestamps: Vec<f64>,
}

impl Trajectory {
    pub fn new(poses: Vec<PoseSE3>, timestamps: Vec<f64>) -> Result<Self> {
        if poses.is_empty() {
            return Err(Error::domain("trajectory needs at least one pose"));
        }
        if poses.len() != timestamps.len() {
            return Err(Error::shape(format!(
                "{} poses but {} timestamps",
                poses.len(),
                timestamps.len()
            )));
        }
        if timestamps.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::domain("timestamps must be strictly increasing"));
        }
        Ok(Trajectory { poses, timestamps })
    }

    /// Uniformly timestamped trajectory starting at t = 0.
    pub fn with_rate(poses: Vec<PoseSE3>, rate: f64) -> Result<Self> {
        if !(rate > 0.0) {
            return Err(Error::domain(format!("rate must be positive, got {rate}")));
        }
        let ts = (0..poses.len()).map(|i| i as f64 / rate).collect();
        Self::new(poses, ts)
    }

    pub fn poses(&self) -> &[PoseSE3] {
        &self.poses
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.poses.iter().map(|p| p.translation).collect()
    }

    /// Whether the first pose is the identity to `tol`.
    pub fn is_anchored(&self, tol: f64) -> bool {
        let p = &self.poses[0];
        (p.rotation - Matrix3::identity()).norm() <= tol && p.translation.norm() <= tol
    }

    /// Re-expresses every pose relative to the first one.
    pub fn anchored(&self) -> Trajectory {
        let inv0 = self.poses[0].inverse();
        Trajectory {
            poses: self.poses.iter().map(|p| inv0.compose(p)).collect(),
            timestamps: self.timestamps.clone(),
        }
    }

    /// Applies `g ∘ pose` to every pose.
    pub fn transformed(&self, g: &PoseSE3) -> Trajectory {
        Trajectory {
            poses: self.poses.iter().map(|p| g.compose(p)).collect(),
            timestamps: self.timestamps.clone(),
        }
    }

    /// Consecutive relative motions `pose[i]⁻¹ pose[i+1]`.
    pub fn relative_poses(&self) -> Vec<PoseSE3> {
        self.poses
            .windows(2)
            .map(|w| w[0].inverse().compose(&w[1]))
            .collect()
    }

    /// Cumulative path length along the positions.
    pub fn path_lengths(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.poses.len());
        let mut acc = 0.0;
        out.push(0.0);
        for w in self.poses.windows(2) {
            acc += (w[1].translation - w[0].translation).norm();
            out.push(acc);
        }
        out
    }
}

/// Chains relative motions into an absolute trajectory anchored at identity.
///
/// `timestamps` has one entry per output pose (`relative.len() + 1`).
pub fn accumulate(relative: &[PoseSE3], timestamps: &[f64]) -> Result<Trajectory> {
    if relative.is_empty() {
        return Err(Error::domain("cannot accumulate an empty list of relative poses"));
    }
    let mut poses = Vec::with_capacity(relative.len() + 1);
    poses.push(PoseSE3::identity());
    for rel in relative {
        let last = *poses.last().unwrap();
        poses.push(last.compose(rel));
    }
    Trajectory::new(poses, timestamps.to_vec())
}
