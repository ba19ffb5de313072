//! Procedural scenes with exact ground truth.
//!
//! Two scene kinds are provided. `PlaneBoxes` ray-casts a textured ground
//! plane and axis-aligned boxes placed along the camera path, giving dense
//! depth with real occlusions. `PointSprites` places isolated sprites at
//! frame-1 pixel centers and splats each one into frame 2 as a constant 2×2
//! block around its exact projection, so that bilinear depth sampling at the
//! flow target returns the analytic frame-2 depth with no approximation.
//!
//! Sprite sets are drawn per pair from a stream keyed on the two frame
//! indices, so `Sequence::pair` is order independent and reproducible.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow3d::{DepthMap, FlowField2D};
use crate::geometry::{project, rot_x, rot_y, rot_z, CameraIntrinsics, PoseSE3, Trajectory};

/// Surfaces beyond this camera depth (meters) render as sky.
pub const FAR_DEPTH: f64 = 80.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    PlaneBoxes,
    PointSprites,
}

/// Car-like camera motion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionSpec {
    /// `[min, max]` m/s; one speed is drawn per sequence.
    pub speed: [f64; 2],
    /// `[min, max]` rad/s bound on the yaw-rate amplitude.
    pub yaw_rate: [f64; 2],
    /// Seconds.
    pub duration: f64,
    /// Base frame rate `f₀`, Hz.
    pub base_rate: f64,
    /// Pitch/roll oscillation amplitude in rad per m/s of speed.
    #[serde(default = "default_wobble")]
    pub wobble: f64,
}

fn default_wobble() -> f64 {
    0.004
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    pub scene: SceneKind,
    pub intrinsics: CameraIntrinsics,
    pub motion: MotionSpec,
    /// Camera height above the ground plane, meters.
    #[serde(default = "default_height")]
    pub camera_height: f64,
    /// Downward tilt of the camera relative to the vehicle, rad.
    #[serde(default = "default_mount_pitch")]
    pub mount_pitch: f64,
    /// Number of boxes in a `PlaneBoxes` scene.
    #[serde(default = "default_boxes")]
    pub boxes: usize,
    /// Side of the pixel cell holding one sprite in a `PointSprites` scene.
    #[serde(default = "default_sprite_cell")]
    pub sprite_cell: usize,
}

fn default_height() -> f64 {
    1.5
}
fn default_mount_pitch() -> f64 {
    0.15
}
fn default_boxes() -> usize {
    24
}
fn default_sprite_cell() -> usize {
    4
}

impl SceneSpec {
    /// Desk-scale defaults: 64×64, 12 Hz, 12 s, 2–6 m/s.
    pub fn desk(seed: u64, scene: SceneKind) -> Self {
        SceneSpec {
            seed,
            scene,
            intrinsics: CameraIntrinsics {
                fu: 48.0,
                fv: 48.0,
                cu: 31.5,
                cv: 31.5,
                width: 64,
                height: 64,
            },
            motion: MotionSpec {
                speed: [2.0, 6.0],
                yaw_rate: [0.0, 0.35],
                duration: 12.0,
                base_rate: 12.0,
                wobble: default_wobble(),
            },
            camera_height: default_height(),
            mount_pitch: default_mount_pitch(),
            boxes: default_boxes(),
            sprite_cell: default_sprite_cell(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        let m = &self.motion;
        let range_ok = |r: [f64; 2]| r.iter().all(|x| x.is_finite() && *x >= 0.0) && r[0] <= r[1];
        if !range_ok(m.speed) || !range_ok(m.yaw_rate) {
            return Err(Error::domain("speed and yaw-rate ranges must be finite, non-negative and ordered"));
        }
        if !(m.base_rate > 0.0) || !m.base_rate.is_finite() {
            return Err(Error::domain("base frame rate must be positive"));
        }
        if !(m.duration > 0.0) || !m.duration.is_finite() {
            return Err(Error::domain("duration must be positive"));
        }
        if self.frame_count() < 2 {
            return Err(Error::domain("duration too short for a single frame pair"));
        }
        if !(m.wobble >= 0.0) || !(self.camera_height > 0.0) || !self.mount_pitch.is_finite() {
            return Err(Error::domain("wobble, camera height or mount pitch out of range"));
        }
        if self.sprite_cell < 3 {
            return Err(Error::domain("sprite cell must be at least 3 px"));
        }
        Ok(())
    }

    pub fn frame_count(&self) -> usize {
        (self.motion.duration * self.motion.base_rate + 1e-9).floor() as usize + 1
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: SceneSpec = toml::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scene spec serializes")
    }
}

/// Row-major RGB image, channels interleaved, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl RgbImage {
    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        RgbImage {
            width,
            height,
            data: rgb.iter().copied().cycle().take(width * height * 3).collect(),
        }
    }

    #[inline]
    pub fn get(&self, i: usize) -> [f32; 3] {
        [self.data[3 * i], self.data[3 * i + 1], self.data[3 * i + 2]]
    }

    #[inline]
    pub fn set(&mut self, i: usize, rgb: [f32; 3]) {
        self.data[3 * i..3 * i + 3].copy_from_slice(&rgb);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FramePair {
    pub kind: SceneKind,
    /// Sequence indices of the two frames.
    pub frames: (usize, usize),
    pub image1: RgbImage,
    pub image2: RgbImage,
    pub depth1: DepthMap,
    pub depth2: DepthMap,
    pub flow: FlowField2D,
    pub intrinsics: CameraIntrinsics,
    /// Camera-2 pose in camera-1 coordinates: `X₁ = R X₂ + t`.
    pub pose: PoseSE3,
    pub delta_t: f64,
    pub frame_rate: f64,
    /// Analytic `X₂ − X₁` per pixel with positive `depth1`, zero elsewhere.
    pub scene_flow: Vec<Vector3<f64>>,
    /// Pixel reprojects in bounds and is not occluded in frame 2.
    pub visible: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Aabb {
    min: Vector3<f64>,
    max: Vector3<f64>,
    color: [f32; 3],
}

impl Aabb {
    /// Entry distance and outward normal axis of the hit face.
    fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, usize)> {
        let (mut t0, mut t1, mut axis) = (f64::NEG_INFINITY, f64::INFINITY, 0);
        for a in 0..3 {
            if d[a].abs() < 1e-15 {
                if o[a] < self.min[a] || o[a] > self.max[a] {
                    return None;
                }
                continue;
            }
            let (mut n, mut f) = ((self.min[a] - o[a]) / d[a], (self.max[a] - o[a]) / d[a]);
            if n > f {
                std::mem::swap(&mut n, &mut f);
            }
            if n > t0 {
                t0 = n;
                axis = a;
            }
            t1 = t1.min(f);
        }
        (t0 <= t1 && t0 > 1e-6).then_some((t0, axis))
    }
}

const PALETTE: [[f32; 3]; 6] = [
    [0.85, 0.30, 0.25],
    [0.25, 0.55, 0.85],
    [0.90, 0.75, 0.20],
    [0.35, 0.75, 0.40],
    [0.65, 0.40, 0.80],
    [0.90, 0.55, 0.25],
];

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn cell_hash(a: i64, b: i64) -> u64 {
    splitmix((a as u64).wrapping_mul(0x1000_0000_01b3) ^ splitmix(b as u64))
}

#[derive(Debug, Clone)]
enum Scene {
    PlaneBoxes { ground_y: f64, boxes: Vec<Aabb> },
    PointSprites,
}

impl Scene {
    /// Nearest hit within the far plane; `None` renders as sky.
    fn trace(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, [f32; 3])> {
        let Scene::PlaneBoxes { ground_y, boxes } = self else {
            return None;
        };
        let mut best: Option<(f64, [f32; 3])> = None;
        if d.y > 1e-12 {
            let lam = (ground_y - o.y) / d.y;
            if lam > 1e-6 && lam <= FAR_DEPTH {
                let p = o + d * lam;
                let h = cell_hash(p.x.floor() as i64, p.z.floor() as i64);
                let base = 0.35 + 0.3 * (h % 1000) as f32 / 1000.0;
                let fine = if ((p.x * 4.0).floor() + (p.z * 4.0).floor()) as i64 % 2 == 0 { 1.0 } else { 0.8 };
                let g = base * fine;
                best = Some((lam, [g * 0.9, g, g * 0.8]));
            }
        }
        for b in boxes {
            if let Some((lam, axis)) = b.intersect(o, d) {
                if lam <= FAR_DEPTH && best.is_none_or(|(l, _)| lam < l) {
                    let p = o + d * lam;
                    let shade = [0.95, 0.7, 0.8][axis] as f32;
                    let c = ((p.x * 2.0).floor() + (p.y * 2.0).floor() + (p.z * 2.0).floor()) as i64;
                    let stripe = if c % 2 == 0 { 1.0 } else { 0.75 };
                    let col = b.color.map(|x| x * shade * stripe);
                    best = Some((lam, col));
                }
            }
        }
        best
    }
}

fn sky(d: &Vector3<f64>) -> [f32; 3] {
    let e = (-d.y / d.norm()).clamp(0.0, 1.0) as f32;
    [0.55 + 0.2 * e, 0.7 + 0.15 * e, 0.95]
}

/// A generated sequence: scene, scene-frame camera poses and their anchored
/// ground-truth trajectory. Pairs are rendered on demand.
#[derive(Debug, Clone)]
pub struct Sequence {
    pub spec: SceneSpec,
    scene: Scene,
    world_poses: Vec<PoseSE3>,
    trajectory: Trajectory,
}

fn uniform(rng: &mut impl Rng, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.random_range(r[0]..r[1])
    } else {
        r[0]
    }
}

impl Sequence {
    pub fn new(spec: &SceneSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let world_poses = motion(spec, &mut rng);
        let scene = match spec.scene {
            SceneKind::PlaneBoxes => place_boxes(spec, &world_poses, &mut rng),
            SceneKind::PointSprites => Scene::PointSprites,
        };
        let timestamps = (0..world_poses.len()).map(|i| i as f64 / spec.motion.base_rate).collect();
        let trajectory = Trajectory::new(world_poses.clone(), timestamps)?.anchored();
        Ok(Sequence {
            spec: spec.clone(),
            scene,
            world_poses,
            trajectory,
        })
    }

    pub fn len(&self) -> usize {
        self.world_poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.world_poses.is_empty()
    }

    /// Ground truth, anchored at the identity on frame 0.
    pub fn trajectory(&self) -> &Trajectory {
        &self.trajectory
    }

    fn render(&self, frame: usize) -> (RgbImage, DepthMap) {
        let k = &self.spec.intrinsics;
        let (w, h) = (k.width, k.height);
        let pose = &self.world_poses[frame];
        let mut img = RgbImage::filled(w, h, [0.0; 3]);
        let mut depth = DepthMap::filled(w, h, 0.0);
        for v in 0..h {
            for u in 0..w {
                let ray = k.ray(u as f64, v as f64);
                let d = pose.rotation * ray;
                let i = v * w + u;
                match self.scene.trace(&pose.translation, &d) {
                    Some((lam, col)) => {
                        depth.data[i] = lam;
                        img.set(i, col);
                    }
                    None => img.set(i, sky(&d)),
                }
            }
        }
        (img, depth)
    }

    /// Pair of frames `(i, i + k)`.
    pub fn pair(&self, i: usize, k: usize) -> Result<FramePair> {
        if k == 0 || i + k >= self.len() {
            return Err(Error::domain(format!(
                "pair ({i}, {}) outside sequence of {} frames",
                i + k,
                self.len()
            )));
        }
        let pose = self.world_poses[i].inverse().compose(&self.world_poses[i + k]);
        let rate = self.spec.motion.base_rate / k as f64;
        let kk = self.spec.intrinsics;
        let mut p = match self.scene {
            Scene::PlaneBoxes { .. } => {
                let (image1, depth1) = self.render(i);
                let (image2, depth2) = self.render(i + k);
                dense_pair(image1, image2, depth1, depth2, kk, pose)
            }
            Scene::PointSprites => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
                rng.set_stream(((i as u64) << 32) | (i + k) as u64);
                let (image1, depth1) = sprite_frame(&kk, self.spec.sprite_cell, &mut rng);
                splat_pair(&image1, &depth1, kk, pose)
            }
        };
        p.frames = (i, i + k);
        p.delta_t = k as f64 / self.spec.motion.base_rate;
        p.frame_rate = rate;
        Ok(p)
    }

    /// Consecutive pairs `(0, k), (k, 2k), …`.
    pub fn pairs(&self, k: usize) -> Result<Vec<FramePair>> {
        if k == 0 || k >= self.len() {
            return Err(Error::domain(format!("skip {k} invalid for {} frames", self.len())));
        }
        (0..(self.len() - 1) / k).map(|j| self.pair(j * k, k)).collect()
    }
}

/// Base-rate pairs and the anchored ground-truth trajectory.
pub fn generate_sequence(spec: &SceneSpec) -> Result<(Vec<FramePair>, Trajectory)> {
    let seq = Sequence::new(spec)?;
    Ok((seq.pairs(1)?, seq.trajectory.clone()))
}

fn motion(spec: &SceneSpec, rng: &mut impl Rng) -> Vec<PoseSE3> {
    use std::f64::consts::TAU;
    let m = &spec.motion;
    let speed = uniform(rng, m.speed);
    let amp = uniform(rng, m.yaw_rate) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let fw: f64 = rng.random_range(0.05..0.15);
    let phase: f64 = rng.random_range(0.0..TAU);
    let pitch_amp = m.wobble * speed * rng.random_range(0.5..1.0);
    let roll_amp = m.wobble * speed * rng.random_range(0.5..1.0);
    let (fp, fr): (f64, f64) = (rng.random_range(0.3..1.0), rng.random_range(0.3..1.0));

    let heading = |t: f64| amp / (TAU * fw) * (phase.cos() - (TAU * fw * t + phase).cos());
    let velocity = |t: f64| {
        let h = heading(t);
        Vector3::new(h.sin(), 0.0, h.cos()) * speed
    };
    let n = spec.frame_count();
    let dt = 1.0 / m.base_rate;
    const SUB: usize = 16;
    let mut pos = Vector3::zeros();
    let mut poses = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 * dt;
        if i > 0 {
            // composite Simpson over the previous frame interval
            let t0 = t - dt;
            let hs = dt / SUB as f64;
            let mut acc = velocity(t0) + velocity(t);
            for j in 1..SUB {
                acc += velocity(t0 + j as f64 * hs) * if j % 2 == 1 { 4.0 } else { 2.0 };
            }
            pos += acc * (hs / 3.0);
        }
        let pitch = pitch_amp * (TAU * fp * t).sin();
        let roll = roll_amp * (TAU * fr * t).sin();
        let r: Matrix3<f64> = rot_y(heading(t)) * rot_z(roll) * rot_x(pitch - spec.mount_pitch);
        poses.push(PoseSE3 {
            rotation: r,
            translation: pos,
        });
    }
    poses
}

fn place_boxes(spec: &SceneSpec, poses: &[PoseSE3], rng: &mut impl Rng) -> Scene {
    let ground_y = spec.camera_height;
    let path: Vec<Vector3<f64>> = poses.iter().map(|p| p.translation).collect();
    let mut boxes = Vec::with_capacity(spec.boxes);
    let mut attempts = 0;
    while boxes.len() < spec.boxes && attempts < spec.boxes * 50 {
        attempts += 1;
        let i = rng.random_range(0..path.len());
        let anchor = path[i];
        let ahead = rng.random_range(0.0..12.0);
        let heading_dir = {
            let step = path[(i + 1).min(path.len() - 1)] - path[i.saturating_sub(1)];
            if step.norm() > 1e-9 {
                step.normalize()
            } else {
                let f = poses[i].rotation * Vector3::z();
                Vector3::new(f.x, 0.0, f.z).normalize()
            }
        };
        let side = Vector3::new(heading_dir.z, 0.0, -heading_dir.x);
        let lateral = rng.random_range(2.5..7.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let c = anchor + heading_dir * ahead + side * lateral;
        let half = Vector3::<f64>::new(rng.random_range(0.3..1.2), rng.random_range(0.4..1.5), rng.random_range(0.3..1.2));
        let clear = half.x.hypot(half.z) + 1.2;
        if path.iter().any(|p| (p.x - c.x).hypot(p.z - c.z) < clear) {
            continue;
        }
        boxes.push(Aabb {
            min: Vector3::new(c.x - half.x, ground_y - 2.0 * half.y, c.z - half.z),
            max: Vector3::new(c.x + half.x, ground_y, c.z + half.z),
            color: PALETTE[rng.random_range(0..PALETTE.len())],
        });
    }
    Scene::PlaneBoxes { ground_y, boxes }
}

/// Labels for a densely rendered pair.
fn dense_pair(
    image1: RgbImage,
    image2: RgbImage,
    depth1: DepthMap,
    depth2: DepthMap,
    k: CameraIntrinsics,
    pose: PoseSE3,
) -> FramePair {
    let (w, h) = (k.width, k.height);
    let n = w * h;
    let inv = pose.inverse();
    let mut dx = vec![0.0; n];
    let mut dy = vec![0.0; n];
    let mut scene_flow = vec![Vector3::zeros(); n];
    let mut visible = vec![false; n];
    for v in 0..h {
        for u in 0..w {
            let i = v * w + u;
            let (uf, vf) = (u as f64, v as f64);
            let z1 = depth1.data[i];
            let ray = k.ray(uf, vf);
            if z1 > 0.0 {
                let x1 = ray * z1;
                let x2 = inv.transform_point(&x1);
                scene_flow[i] = x2 - x1;
                if let Ok((u2, v2, z2)) = project(&x2, &k) {
                    dx[i] = u2 - uf;
                    dy[i] = v2 - vf;
                    if k.contains(u2, v2) {
                        let d2 = depth2.at(u2.round() as usize, v2.round() as usize);
                        visible[i] = d2 > 0.0 && (d2 - z2).abs() <= 0.03 * z2;
                    }
                }
            } else {
                // points at infinity move with the rotation only
                let d2 = inv.rotation * ray;
                if let Ok((u2, v2, _)) = project(&d2, &k) {
                    dx[i] = u2 - uf;
                    dy[i] = v2 - vf;
                }
            }
        }
    }
    FramePair {
        kind: SceneKind::PlaneBoxes,
        frames: (0, 1),
        image1,
        image2,
        depth1,
        depth2,
        flow: FlowField2D {
            width: w,
            height: h,
            dx,
            dy,
        },
        intrinsics: k,
        pose,
        delta_t: 0.0,
        frame_rate: 0.0,
        scene_flow,
        visible,
    }
}

const SPRITE_BACKGROUND: [f32; 3] = [0.5, 0.5, 0.5];

/// One sprite per `cell×cell` block at a random pixel, log-uniform depth.
fn sprite_frame(k: &CameraIntrinsics, cell: usize, rng: &mut impl Rng) -> (RgbImage, DepthMap) {
    let (w, h) = (k.width, k.height);
    let mut img = RgbImage::filled(w, h, SPRITE_BACKGROUND);
    let mut depth = DepthMap::filled(w, h, 0.0);
    for by in (0..h).step_by(cell) {
        for bx in (0..w).step_by(cell) {
            let u = (bx + rng.random_range(0..cell)).min(w - 1);
            let v = (by + rng.random_range(0..cell)).min(h - 1);
            let z = (rng.random_range(2.0f64.ln()..25.0f64.ln())).exp();
            let i = v * w + u;
            depth.data[i] = z;
            img.set(i, [rng.random(), rng.random(), rng.random()]);
        }
    }
    (img, depth)
}

/// Splats frame-1 sprites into frame 2 under `pose`. Sprites whose 2×2
/// targets collide are removed from frame 1.
fn splat_pair(image1: &RgbImage, depth1: &DepthMap, k: CameraIntrinsics, pose: PoseSE3) -> FramePair {
    let (w, h) = (k.width, k.height);
    let n = w * h;
    let inv = pose.inverse();
    struct Target {
        src: usize,
        u2: f64,
        v2: f64,
        z2: f64,
        cells: Vec<usize>,
    }
    let mut targets = Vec::new();
    let mut claims = vec![0u32; n];
    let mut d1 = depth1.clone();
    let mut dx = vec![0.0; n];
    let mut dy = vec![0.0; n];
    let mut scene_flow = vec![Vector3::zeros(); n];
    for i in (0..n).filter(|&i| depth1.data[i] > 0.0) {
        let (uf, vf) = ((i % w) as f64, (i / w) as f64);
        let x1 = k.ray(uf, vf) * depth1.data[i];
        let x2 = inv.transform_point(&x1);
        scene_flow[i] = x2 - x1;
        let Ok((u2, v2, z2)) = project(&x2, &k) else {
            continue;
        };
        dx[i] = u2 - uf;
        dy[i] = v2 - vf;
        if !k.contains(u2, v2) {
            continue;
        }
        let (u0, v0) = (u2.floor() as usize, v2.floor() as usize);
        let cells: Vec<usize> = [(0, 0), (1, 0), (0, 1), (1, 1)]
            .iter()
            .filter(|(a, b)| u0 + a < w && v0 + b < h)
            .map(|(a, b)| (v0 + b) * w + u0 + a)
            .collect();
        for &c in &cells {
            claims[c] += 1;
        }
        targets.push(Target { src: i, u2, v2, z2, cells });
    }
    let mut image2 = RgbImage::filled(w, h, SPRITE_BACKGROUND);
    let mut d2 = DepthMap::filled(w, h, 0.0);
    let mut visible = vec![false; n];
    for t in &targets {
        if t.cells.iter().any(|&c| claims[c] > 1) {
            d1.data[t.src] = 0.0;
            scene_flow[t.src] = Vector3::zeros();
            dx[t.src] = 0.0;
            dy[t.src] = 0.0;
            continue;
        }
        let col = image1.get(t.src);
        for &c in &t.cells {
            d2.data[c] = t.z2;
            image2.set(c, col);
        }
        visible[t.src] = true;
        debug_assert!(t.u2.is_finite() && t.v2.is_finite());
    }
    let mut img1 = image1.clone();
    for i in 0..n {
        if depth1.data[i] > 0.0 && d1.data[i] == 0.0 {
            img1.set(i, SPRITE_BACKGROUND);
        }
    }
    FramePair {
        kind: SceneKind::PointSprites,
        frames: (0, 1),
        image1: img1,
        image2,
        depth1: d1,
        depth2: d2,
        flow: FlowField2D {
            width: w,
            height: h,
            dx,
            dy,
        },
        intrinsics: k,
        pose,
        delta_t: 0.0,
        frame_rate: 0.0,
        scene_flow,
        visible,
    }
}

/// Frame skipping: keeps frames `0, k, 2k, …` of a consecutive pair list,
/// composing the `k` intermediate poses and re-deriving frame-2 labels.
pub fn resample_frequency(pairs: &[FramePair], k: usize) -> Result<Vec<FramePair>> {
    if k == 0 {
        return Err(Error::domain("skip factor must be at least 1"));
    }
    if pairs.len() < k {
        return Err(Error::domain(format!("skip {k} exceeds {} available pairs", pairs.len())));
    }
    if k == 1 {
        return Ok(pairs.to_vec());
    }
    if let Some(j) = pairs.windows(2).position(|w| w[0].frames.1 != w[1].frames.0) {
        return Err(Error::domain(format!("pairs {j} and {} are not consecutive", j + 1)));
    }
    pairs
        .chunks_exact(k)
        .map(|chunk| {
            let first = &chunk[0];
            let last = &chunk[k - 1];
            let pose = chunk[1..].iter().fold(first.pose, |acc, p| acc.compose(&p.pose));
            let mut out = match first.kind {
                SceneKind::PlaneBoxes => dense_pair(
                    first.image1.clone(),
                    last.image2.clone(),
                    first.depth1.clone(),
                    last.depth2.clone(),
                    first.intrinsics,
                    pose,
                ),
                SceneKind::PointSprites => splat_pair(&first.image1, &first.depth1, first.intrinsics, pose),
            };
            out.frames = (first.frames.0, last.frames.1);
            out.delta_t = chunk.iter().map(|p| p.delta_t).sum();
            out.frame_rate = first.frame_rate / k as f64;
            Ok(out)
        })
        .collect()
}

/// Noisy depth and intrinsics priors with untouched labels.
///
/// Depth is scaled per pixel by `exp(σ_d z)`; each focal length by
/// `1 + σ_k z`, redrawn until positive.
pub fn perturb_priors(pair: &FramePair, depth_sigma: f64, intrinsics_sigma: f64, rng: &mut impl Rng) -> Result<FramePair> {
    if !(depth_sigma >= 0.0) || !(intrinsics_sigma >= 0.0) {
        return Err(Error::domain("noise levels must be non-negative"));
    }
    let mut out = pair.clone();
    if depth_sigma > 0.0 {
        let normal = Normal::new(0.0, depth_sigma).expect("finite sigma");
        for d in out.depth1.data.iter_mut().chain(out.depth2.data.iter_mut()) {
            *d *= normal.sample(rng).exp();
        }
    }
    if intrinsics_sigma > 0.0 {
        let normal = Normal::new(1.0, intrinsics_sigma).expect("finite sigma");
        let mut draw = || loop {
            let f: f64 = normal.sample(rng);
            if f > 0.0 {
                break f;
            }
        };
        out.intrinsics.fu *= draw();
        out.intrinsics.fv *= draw();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::back_project;

    fn still(kind: SceneKind) -> SceneSpec {
        let mut s = SceneSpec::desk(3, kind);
        s.motion.speed = [0.0, 0.0];
        s.motion.yaw_rate = [0.0, 0.0];
        s.motion.duration = 0.5;
        s
    }

    #[test]
    fn stationary_camera_has_identity_poses_and_zero_flow() {
        for kind in [SceneKind::PlaneBoxes, SceneKind::PointSprites] {
            let (pairs, traj) = generate_sequence(&still(kind)).unwrap();
            assert_eq!(traj.len(), 7);
            for p in &pairs {
                assert!((p.pose.rotation - Matrix3::identity()).abs().max() < 1e-15);
                assert!(p.pose.translation.norm() < 1e-15);
                assert!(p.flow.dx.iter().chain(&p.flow.dy).all(|f| f.abs() < 1e-12));
            }
        }
    }

    #[test]
    fn zero_duration_is_rejected() {
        let mut s = SceneSpec::desk(1, SceneKind::PlaneBoxes);
        s.motion.duration = 0.0;
        assert!(matches!(Sequence::new(&s), Err(Error::Domain(_))));
        s.motion.duration = 1.0;
        s.motion.base_rate = -1.0;
        assert!(Sequence::new(&s).is_err());
    }

    #[test]
    fn same_seed_is_bit_identical() {
        for kind in [SceneKind::PlaneBoxes, SceneKind::PointSprites] {
            let mut s = SceneSpec::desk(11, kind);
            s.motion.duration = 1.0;
            let (a, ta) = generate_sequence(&s).unwrap();
            let (b, tb) = generate_sequence(&s).unwrap();
            assert_eq!(a, b);
            assert_eq!(ta, tb);
        }
    }

    #[test]
    fn flow_is_consistent_with_depth_and_pose() {
        for kind in [SceneKind::PlaneBoxes, SceneKind::PointSprites] {
            let mut s = SceneSpec::desk(5, kind);
            s.motion.duration = 1.0;
            let seq = Sequence::new(&s).unwrap();
            for p in [seq.pair(0, 1).unwrap(), seq.pair(4, 3).unwrap()] {
                let k = &p.intrinsics;
                let mut checked = 0;
                for v in 0..k.height {
                    for u in 0..k.width {
                        let i = v * k.width + u;
                        let z = p.depth1.data[i];
                        if z <= 0.0 {
                            continue;
                        }
                        let x1 = back_project(u as f64, v as f64, z, k).unwrap();
                        let x2 = p.pose.inverse().transform_point(&x1);
                        let Ok((u2, v2, _)) = project(&x2, k) else { continue };
                        if !k.contains(u2, v2) {
                            continue;
                        }
                        assert!((u as f64 + p.flow.dx[i] - u2).abs() < 1e-6);
                        assert!((v as f64 + p.flow.dy[i] - v2).abs() < 1e-6);
                        checked += 1;
                    }
                }
                assert!(checked > 50, "{kind:?}: only {checked} pixels checked");
            }
        }
    }

    #[test]
    fn plane_scene_sees_ground_and_boxes() {
        let seq = Sequence::new(&SceneSpec::desk(2, SceneKind::PlaneBoxes)).unwrap();
        let p = seq.pair(10, 1).unwrap();
        let valid = p.depth1.data.iter().filter(|d| **d > 0.0).count();
        assert!(valid > p.depth1.data.len() / 3, "{valid}");
        assert!(p.visible.iter().filter(|v| **v).count() > valid / 2);
    }

    #[test]
    fn delta_t_tracks_skip() {
        let seq = Sequence::new(&SceneSpec::desk(2, SceneKind::PointSprites)).unwrap();
        let p = seq.pair(0, 3).unwrap();
        assert_eq!(p.delta_t, 3.0 / 12.0);
        assert_eq!(p.frame_rate, 4.0);
        assert_eq!(p.frames, (0, 3));
        assert!(seq.pair(seq.len() - 1, 1).is_err());
    }

    #[test]
    fn spec_toml_round_trip() {
        let s = SceneSpec::desk(9, SceneKind::PointSprites);
        let back = SceneSpec::from_toml(&s.to_toml()).unwrap();
        assert_eq!(back, s);
        assert!(SceneSpec::from_toml("seed = 1").is_err());
    }

    #[test]
    fn resample_identity_and_bounds() {
        let mut s = SceneSpec::desk(4, SceneKind::PointSprites);
        s.motion.duration = 0.5;
        let (pairs, _) = generate_sequence(&s).unwrap();
        assert_eq!(resample_frequency(&pairs, 1).unwrap(), pairs);
        assert!(resample_frequency(&pairs, pairs.len() + 1).is_err());
        assert!(resample_frequency(&pairs, 0).is_err());
    }

    #[test]
    fn zero_noise_is_identity() {
        let mut s = SceneSpec::desk(4, SceneKind::PlaneBoxes);
        s.motion.duration = 0.2;
        let (pairs, _) = generate_sequence(&s).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(perturb_priors(&pairs[0], 0.0, 0.0, &mut rng).unwrap(), pairs[0]);
    }
}
