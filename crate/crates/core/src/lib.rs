//! Core numerics for time-aware monocular visual odometry: camera geometry,
//! the differentiable 2D-guided 3D flow layer, time-gap encoding, matrix
//! Fisher rotation statistics, a synthetic scene generator with exact ground
//! truth, VO metrics and on-disk formats.

pub mod error;
pub mod fisher;
pub mod flow3d;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod sampling;
pub mod synth;
pub mod temporal;

pub use error::{Error, Result};
pub use geometry::{accumulate, back_project, project, CameraIntrinsics, PoseSE3, Trajectory};
