//! On-disk formats: KITTI-style trajectory files, headed binary arrays and
//! per-sequence dataset directories.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow3d::{DepthMap, FlowField2D};
use crate::geometry::{nearest_rotation, rotation_drift, CameraIntrinsics, PoseSE3, Trajectory};
use crate::synth::{FramePair, RgbImage, SceneSpec};

/// Rotations further than this from orthonormal are rejected on load.
pub const ROTATION_TOLERANCE: f64 = 1e-6;

/// Sidecar path holding one timestamp per line: `traj.txt` → `traj.times.txt`.
pub fn timestamps_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.times.txt"))
}

fn fmt_num(x: f64) -> String {
    // 15 significant digits
    format!("{x:.14e}")
}

#[rustfmt::skip]
pub fn pose_to_row(p: &PoseSE3) -> [f64; 12] {
    let (r, t) = (&p.rotation, &p.translation);
    [
        r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x,
        r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y,
        r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z,
    ]
}

pub fn pose_from_row(v: &[f64; 12]) -> PoseSE3 {
    PoseSE3 {
        rotation: Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]),
        translation: Vector3::new(v[3], v[7], v[11]),
    }
}

/// Parses one 12-number line; `line` is 1-based and used in errors.
pub fn parse_pose_line(text: &str, path: &Path, line: usize) -> Result<PoseSE3> {
    let perr = |message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let fields: Vec<&str> = text.split_whitespace().collect();
    if fields.len() != 12 {
        return Err(perr(format!("expected 12 numbers, found {}", fields.len())));
    }
    let mut v = [0.0f64; 12];
    for (slot, f) in v.iter_mut().zip(&fields) {
        *slot = f.parse().map_err(|_| perr(format!("not a number: {f:?}")))?;
        if !slot.is_finite() {
            return Err(perr(format!("non-finite value {f:?}")));
        }
    }
    let mut pose = pose_from_row(&v);
    let drift = rotation_drift(&pose.rotation);
    if drift > ROTATION_TOLERANCE || pose.rotation.determinant() <= 0.0 {
        return Err(perr(format!("rotation block is not a rotation (drift {drift:.3e})")));
    }
    if drift > 1e-12 {
        log::warn!("{}:{line}: re-orthonormalizing rotation (drift {drift:.3e})", path.display());
        pose.rotation = nearest_rotation(&pose.rotation);
    }
    Ok(pose)
}

/// Reads a trajectory and its timestamp sidecar, falling back to uniform
/// timestamps at `default_rate` Hz when the sidecar is absent.
pub fn read_trajectory(path: &Path, default_rate: f64) -> Result<Trajectory> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut poses = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        poses.push(parse_pose_line(&line, path, i + 1)?);
    }
    if poses.is_empty() {
        return Err(Error::Format(format!("{}: no poses", path.display())));
    }
    let tpath = timestamps_path(path);
    if !tpath.exists() {
        return Trajectory::with_rate(poses, default_rate);
    }
    let mut ts = Vec::with_capacity(poses.len());
    for (i, line) in fs::read_to_string(&tpath)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        ts.push(line.trim().parse::<f64>().map_err(|_| Error::Parse {
            path: tpath.clone(),
            line: i + 1,
            message: format!("not a timestamp: {line:?}"),
        })?);
    }
    if ts.len() != poses.len() {
        return Err(Error::Format(format!(
            "{} has {} timestamps for {} poses",
            tpath.display(),
            ts.len(),
            poses.len()
        )));
    }
    Trajectory::new(poses, ts)
}

pub fn trajectory_to_string(traj: &Trajectory) -> (String, String) {
    let mut poses = String::new();
    let mut times = String::new();
    for (p, t) in traj.poses().iter().zip(traj.timestamps()) {
        let row: Vec<String> = pose_to_row(p).iter().map(|x| fmt_num(*x)).collect();
        poses.push_str(&row.join(" "));
        poses.push('\n');
        times.push_str(&fmt_num(*t));
        times.push('\n');
    }
    (poses, times)
}

/// Writes the pose file and its timestamp sidecar.
pub fn write_trajectory(traj: &Trajectory, path: &Path) -> Result<()> {
    let (poses, times) = trajectory_to_string(traj);
    fs::write(path, poses)?;
    fs::write(timestamps_path(path), times)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ArrayHeader {
    shape: Vec<usize>,
    dtype: String,
    endian: String,
    order: String,
}

/// Writes `data` as one JSON header line followed by little-endian `f32`s.
pub fn write_array(path: &Path, shape: &[usize], data: &[f32]) -> Result<()> {
    if shape.iter().product::<usize>() != data.len() {
        return Err(Error::shape(format!("shape {shape:?} does not hold {} values", data.len())));
    }
    let header = ArrayHeader {
        shape: shape.to_vec(),
        dtype: "f32".into(),
        endian: "little".into(),
        order: "row-major".into(),
    };
    let mut buf = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    buf.push(b'\n');
    buf.reserve(data.len() * 4);
    for x in data {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_array(path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let bytes = fs::read(path)?;
    let bad = |m: &str| Error::Format(format!("{}: {m}", path.display()));
    let nl = bytes.iter().position(|b| *b == b'\n').ok_or_else(|| bad("missing header line"))?;
    let header: ArrayHeader = serde_json::from_slice(&bytes[..nl]).map_err(|e| bad(&e.to_string()))?;
    if header.dtype != "f32" || header.endian != "little" || header.order != "row-major" {
        return Err(bad("unsupported dtype, endianness or order"));
    }
    let body = &bytes[nl + 1..];
    let n: usize = header.shape.iter().product();
    if body.len() != n * 4 {
        return Err(bad(&format!("expected {} bytes of data, found {}", n * 4, body.len())));
    }
    let data = body.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok((header.shape, data))
}

pub fn write_png(path: &Path, img: &RgbImage) -> Result<()> {
    let bytes: Vec<u8> = img.data.iter().map(|x| (x.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, bytes)
        .ok_or_else(|| Error::shape("image buffer does not match its size"))?;
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn read_png(path: &Path) -> Result<RgbImage> {
    let img = image::open(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
        .to_rgb8();
    Ok(RgbImage {
        width: img.width() as usize,
        height: img.height() as usize,
        data: img.as_raw().iter().map(|b| *b as f32 / 255.0).collect(),
    })
}

pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub frames: [usize; 2],
    pub delta_t: f64,
    pub frame_rate: f64,
    pub pose: [f64; 12],
    pub intrinsics: CameraIntrinsics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub base_rate: f64,
    pub skip: usize,
    pub spec: SceneSpec,
    pub pairs: Vec<PairRecord>,
}

/// A sequence directory loaded into memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub pairs: Vec<FramePair>,
    pub trajectory: Trajectory,
}

fn depth_f32(d: &DepthMap) -> Vec<f32> {
    d.data.iter().map(|x| *x as f32).collect()
}

fn pair_dir(root: &Path, j: usize) -> PathBuf {
    root.join("pairs").join(format!("{j:06}"))
}

/// Writes a sequence directory atomically: everything goes to a sibling
/// temporary directory that is renamed into place at the end.
pub fn write_dataset(out: &Path, spec: &SceneSpec, skip: usize, pairs: &[FramePair], traj: &Trajectory) -> Result<()> {
    if out.exists() {
        return Err(Error::domain(format!("{} already exists", out.display())));
    }
    if pairs.is_empty() {
        return Err(Error::domain("dataset needs at least one pair"));
    }
    let parent = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent)?;
    let name = out.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = parent.join(format!(".{name}.tmp-{}", std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    let result = (|| -> Result<()> {
        fs::create_dir_all(tmp.join("pairs"))?;
        let manifest = Manifest {
            version: DATASET_VERSION,
            seed: spec.seed,
            base_rate: spec.motion.base_rate,
            skip,
            spec: spec.clone(),
            pairs: pairs
                .iter()
                .map(|p| PairRecord {
                    frames: [p.frames.0, p.frames.1],
                    delta_t: p.delta_t,
                    frame_rate: p.frame_rate,
                    pose: pose_to_row(&p.pose),
                    intrinsics: p.intrinsics,
                })
                .collect(),
        };
        let text = toml::to_string(&manifest).map_err(|e| Error::Format(e.to_string()))?;
        fs::File::create(tmp.join("manifest.toml"))?.write_all(text.as_bytes())?;
        write_trajectory(traj, &tmp.join("poses.txt"))?;
        for (j, p) in pairs.iter().enumerate() {
            let d = pair_dir(&tmp, j);
            fs::create_dir_all(&d)?;
            let (w, h) = (p.intrinsics.width, p.intrinsics.height);
            write_png(&d.join("image1.png"), &p.image1)?;
            write_png(&d.join("image2.png"), &p.image2)?;
            write_array(&d.join("depth1.f32"), &[h, w], &depth_f32(&p.depth1))?;
            write_array(&d.join("depth2.f32"), &[h, w], &depth_f32(&p.depth2))?;
            let flow: Vec<f32> = p.flow.dx.iter().zip(&p.flow.dy).flat_map(|(x, y)| [*x as f32, *y as f32]).collect();
            write_array(&d.join("flow.f32"), &[h, w, 2], &flow)?;
            let sf: Vec<f32> = p.scene_flow.iter().flat_map(|v| [v.x as f32, v.y as f32, v.z as f32]).collect();
            write_array(&d.join("scene_flow.f32"), &[h, w, 3], &sf)?;
            let vis: Vec<f32> = p.visible.iter().map(|b| *b as u8 as f32).collect();
            write_array(&d.join("visible.f32"), &[h, w], &vis)?;
        }
        Ok(())
    })();
    match result {
        Ok(()) => {
            fs::rename(&tmp, out)?;
            Ok(())
        }
        Err(e) => {
            let _ = fs::remove_dir_all(&tmp);
            Err(e)
        }
    }
}

fn expect_shape(path: &Path, got: &[usize], want: &[usize]) -> Result<()> {
    if got != want {
        return Err(Error::Format(format!("{}: shape {got:?}, expected {want:?}", path.display())));
    }
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.toml");
    let text = fs::read_to_string(&path)?;
    let m: Manifest = toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if m.version != DATASET_VERSION {
        return Err(Error::Format(format!(
            "{}: dataset version {} unsupported (expected {DATASET_VERSION})",
            path.display(),
            m.version
        )));
    }
    m.spec.validate()?;
    Ok(m)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let trajectory = read_trajectory(&dir.join("poses.txt"), manifest.base_rate / manifest.skip as f64)?;
    let mut pairs = Vec::with_capacity(manifest.pairs.len());
    for (j, rec) in manifest.pairs.iter().enumerate() {
        let d = pair_dir(dir, j);
        let k = rec.intrinsics;
        k.validate()?;
        let (w, h) = (k.width, k.height);
        let load = |name: &str, shape: &[usize]| -> Result<Vec<f32>> {
            let p = d.join(name);
            let (s, data) = read_array(&p)?;
            expect_shape(&p, &s, shape)?;
            Ok(data)
        };
        let depth = |name: &str| -> Result<DepthMap> {
            DepthMap::new(w, h, load(name, &[h, w])?.iter().map(|x| *x as f64).collect())
        };
        let pose = pose_from_row(&rec.pose);
        if rotation_drift(&pose.rotation) > ROTATION_TOLERANCE {
            return Err(Error::Format(format!("{}: pair {j} pose is not a rotation", dir.display())));
        }
        let flow = load("flow.f32", &[h, w, 2])?;
        let sf = load("scene_flow.f32", &[h, w, 3])?;
        let image1 = read_png(&d.join("image1.png"))?;
        let image2 = read_png(&d.join("image2.png"))?;
        if (image1.width, image1.height) != (w, h) || (image2.width, image2.height) != (w, h) {
            return Err(Error::Format(format!("{}: image size mismatch", d.display())));
        }
        pairs.push(FramePair {
            kind: manifest.spec.scene,
            frames: (rec.frames[0], rec.frames[1]),
            image1,
            image2,
            depth1: depth("depth1.f32")?,
            depth2: depth("depth2.f32")?,
            flow: FlowField2D::new(
                w,
                h,
                flow.iter().step_by(2).map(|x| *x as f64).collect(),
                flow.iter().skip(1).step_by(2).map(|x| *x as f64).collect(),
            )?,
            intrinsics: k,
            pose,
            delta_t: rec.delta_t,
            frame_rate: rec.frame_rate,
            scene_flow: sf.chunks_exact(3).map(|c| Vector3::new(c[0] as f64, c[1] as f64, c[2] as f64)).collect(),
            visible: load("visible.f32", &[h, w])?.iter().map(|x| *x > 0.5).collect(),
        });
    }
    Ok(Dataset {
        manifest,
        pairs,
        trajectory,
    })
}
