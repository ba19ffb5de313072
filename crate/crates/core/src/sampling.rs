//! Random rotations and poses for tests, oracles and scene generation.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::geometry::{so3_exp, PoseSE3};

/// Haar-uniform rotation (normalized Gaussian quaternion).
pub fn uniform_rotation(rng: &mut impl Rng) -> Matrix3<f64> {
    loop {
        let q = Quaternion::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        if q.norm() > 1e-9 {
            return *UnitQuaternion::from_quaternion(q).to_rotation_matrix().matrix();
        }
    }
}

/// Pose with axis-angle components uniform in `±rot_scale` and translation
/// components uniform in `±t_scale`.
pub fn random_pose(rng: &mut impl Rng, rot_scale: f64, t_scale: f64) -> PoseSE3 {
    let mut sym = |s: f64| Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0) * s);
    let w = sym(rot_scale);
    let t = sym(t_scale);
    PoseSE3 {
        rotation: so3_exp(&w),
        translation: t,
    }
}
