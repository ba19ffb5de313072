//! Acceptance suite: one PASS/FAIL line per criterion, then a non-zero exit
//! if any criterion failed. Oracles here are written independently of the
//! library code they check.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use nalgebra::{Matrix3, Matrix4, SymmetricEigen, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use tavo_core::fisher::fisher_mode;
use tavo_core::flow3d::{flow3d_forward, DepthMap, Flow3dLayer, FlowField2D};
use tavo_core::metrics::{evaluate, AlignMode, EvalOptions, ScaleErrorMode};
use tavo_core::synth::{generate_sequence, resample_frequency, SceneKind, SceneSpec, Sequence};
use tavo_core::temporal::{condition_features, encode_time, FeatureMap, TimeCondition};
use tavo_core::{accumulate, back_project, CameraIntrinsics, PoseSE3, Trajectory};
use tavo_model::ablation::DataSpec;
use tavo_model::data::GeometryTokens;
use tavo_model::infer::{evaluate_sequences, RateReport};
use tavo_model::{train, EgomotionNet, TrainConfig, TrainingData};

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- 1

const GRID: usize = 16;

fn flow_loss(d1: &DepthMap, d2: &DepthMap, f: &FlowField2D, k: &CameraIntrinsics, w: &[Vector3<f64>]) -> f64 {
    let s = flow3d_forward(d1, d2, f, k).unwrap();
    (0..s.motion.len()).filter(|&i| s.mask[i]).map(|i| s.motion[i].dot(&w[i])).sum()
}

fn criterion_flow_gradients() -> Outcome {
    let n = GRID;
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (hd, hf) = (1e-4, 1e-3);
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-3);
    let (mut worst, mut checked) = (0f64, 0usize);
    for _ in 0..100 {
        let k = CameraIntrinsics::new(
            rng.random_range(8.0..30.0),
            rng.random_range(8.0..30.0),
            rng.random_range(5.0..10.0),
            rng.random_range(5.0..10.0),
            n,
            n,
        )
        .unwrap();
        let mut depth = || DepthMap::new(n, n, (0..n * n).map(|_| rng.random_range(1.0..10.0)).collect()).unwrap();
        let (d1, d2) = (depth(), depth());
        let dx: Vec<f64> = (0..n * n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let dy: Vec<f64> = (0..n * n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let flow = FlowField2D::new(n, n, dx, dy).unwrap();
        let w: Vec<Vector3<f64>> = (0..n * n)
            .map(|_| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let mut layer = Flow3dLayer::new();
        layer.forward(&d1, &d2, &flow, &k).unwrap();
        let g = layer.backward(&w).unwrap();

        let target = |i: usize| ((i % n) as f64 + flow.dx[i], (i / n) as f64 + flow.dy[i]);
        let eligible: Vec<bool> = (0..n * n)
            .map(|i| {
                let (u, v) = target(i);
                let off = |x: f64| (x - x.round()).abs() >= 0.05;
                let inner = |x: f64| (1.0..=(n - 2) as f64).contains(&x);
                off(u) && off(v) && inner(u) && inner(v)
            })
            .collect();
        for i in (0..n * n).filter(|&i| eligible[i]) {
            let (mut a, mut b) = (d1.clone(), d1.clone());
            a.data[i] += hd;
            b.data[i] -= hd;
            let fd = (flow_loss(&a, &d2, &flow, &k, &w) - flow_loss(&b, &d2, &flow, &k, &w)) / (2.0 * hd);
            worst = worst.max(rel(g.depth1[i], fd));
            for axis in 0..2 {
                let (mut fa, mut fb) = (flow.clone(), flow.clone());
                if axis == 0 {
                    fa.dx[i] += hf;
                    fb.dx[i] -= hf;
                } else {
                    fa.dy[i] += hf;
                    fb.dy[i] -= hf;
                }
                let fd = (flow_loss(&d1, &d2, &fa, &k, &w) - flow_loss(&d1, &d2, &fb, &k, &w)) / (2.0 * hf);
                worst = worst.max(rel(if axis == 0 { g.flow_x[i] } else { g.flow_y[i] }, fd));
            }
            checked += 1;
        }
        // frame-2 cells read only by eligible pixels
        let mut clean = vec![true; n * n];
        let mut read = vec![false; n * n];
        for i in 0..n * n {
            let (u, v) = target(i);
            if u < 0.0 || v < 0.0 || u > (n - 1) as f64 || v > (n - 1) as f64 {
                continue;
            }
            for (du, dv) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                let (cu, cv) = (u.floor() as usize + du, v.floor() as usize + dv);
                if cu < n && cv < n {
                    read[cv * n + cu] = true;
                    clean[cv * n + cu] &= eligible[i];
                }
            }
        }
        for q in (0..n * n).filter(|&q| read[q] && clean[q]) {
            let (mut a, mut b) = (d2.clone(), d2.clone());
            a.data[q] += hd;
            b.data[q] -= hd;
            let fd = (flow_loss(&d1, &a, &flow, &k, &w) - flow_loss(&d1, &b, &flow, &k, &w)) / (2.0 * hd);
            worst = worst.max(rel(g.depth2[q], fd));
        }
    }
    check(
        worst < 1e-4 && checked > 1000,
        format!("{checked} eligible pixels, worst relative error {worst:.2e}"),
    )
}

// ---------------------------------------------------------------- 2

fn criterion_geometry_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (mut worst, mut valid, mut mismatched) = (0f64, 0usize, 0usize);
    for p in 0..20 {
        let mut spec = SceneSpec::desk(500 + p, SceneKind::PointSprites);
        spec.motion.duration = 2.0;
        let seq = Sequence::new(&spec).unwrap();
        let k = rng.random_range(1..4);
        let i = rng.random_range(0..seq.len() - k);
        let pair = seq.pair(i, k).unwrap();
        let s = flow3d_forward(&pair.depth1, &pair.depth2, &pair.flow, &pair.intrinsics).unwrap();
        for j in 0..s.mask.len() {
            if s.mask[j] != pair.visible[j] {
                mismatched += 1;
            }
            if s.mask[j] {
                valid += 1;
                worst = worst.max((s.motion[j] - pair.scene_flow[j]).amax());
            }
        }
    }
    check(
        worst <= 1e-6 && valid > 1000 && mismatched == 0,
        format!("{valid} valid pixels over 20 pairs, worst deviation {worst:.2e} m, {mismatched} mask/visibility mismatches"),
    )
}

// ---------------------------------------------------------------- 3

fn criterion_back_projection() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst = 0f64;
    for _ in 0..10 {
        let (w, h) = (rng.random_range(8..65), rng.random_range(8..65));
        let (fu, fv) = (rng.random_range(20.0..120.0), rng.random_range(20.0..120.0));
        let (cu, cv) = (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
        let k = CameraIntrinsics::new(fu, fv, cu, cv, w, h).unwrap();
        let depth = DepthMap::new(w, h, (0..w * h).map(|_| rng.random_range(0.2..80.0)).collect()).unwrap();
        let tokens = GeometryTokens::build(&k, &depth).unwrap();
        for v in 0..h {
            for u in 0..w {
                let i = v * w + u;
                let d = depth.data[i];
                let manual = Vector3::new((u as f64 - cu) / fu * d, (v as f64 - cv) / fv * d, d);
                let lib = back_project(u as f64, v as f64, d, &k).unwrap();
                worst = worst.max((tokens.points[i] - manual).amax()).max((tokens.points[i] - lib).amax());
            }
        }
    }
    check(worst <= 1e-9, format!("10 draws, worst |M - back_project| {worst:.2e}"))
}

// ---------------------------------------------------------------- 4

fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
    let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
    let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]));
    *q.to_rotation_matrix().matrix()
}

fn criterion_fisher_mode() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let (mut beaten, mut worst_so3, mut worst_scale) = (0usize, 0f64, 0f64);
    for _ in 0..200 {
        let scale = 10f64.powf(rng.random_range(-1.0..1.5));
        let f = Matrix3::from_fn(|_, _| StandardNormal.sample(&mut rng)) * scale;
        let r = fisher_mode(&f).unwrap().rotation;
        let best = (r.transpose() * f).trace();
        let sampled = (0..10_000)
            .map(|_| (random_rotation(&mut rng).transpose() * f).trace())
            .fold(f64::MIN, f64::max);
        if sampled > best {
            beaten += 1;
        }
        worst_so3 = worst_so3.max((r.transpose() * r - Matrix3::identity()).amax()).max((r.determinant() - 1.0).abs());
        for c in [0.1, 1.0, 10.0] {
            let rc = fisher_mode(&(f * c)).unwrap().rotation;
            worst_scale = worst_scale.max((rc - r).amax());
        }
    }
    check(
        beaten == 0 && worst_so3 <= 1e-9 && worst_scale <= 1e-12,
        format!("200 matrices: {beaten} beaten by samples, SO(3) deviation {worst_so3:.1e}, scale deviation {worst_scale:.1e}"),
    )
}

// ---------------------------------------------------------------- 5

fn hom(p: &PoseSE3) -> Matrix4<f64> {
    let mut m = Matrix4::identity();
    for r in 0..3 {
        for c in 0..3 {
            m[(r, c)] = p.rotation[(r, c)];
        }
        m[(r, 3)] = p.translation[r];
    }
    m
}

fn angle_of(m: &Matrix4<f64>) -> f64 {
    let s = Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]).norm() / 2.0;
    let c = (m[(0, 0)] + m[(1, 1)] + m[(2, 2)] - 1.0) / 2.0;
    s.atan2(c)
}

/// Segment drift by exhaustive scan, percent and degrees per 100 m.
fn brute_drift(pred: &[Matrix4<f64>], gt: &[Matrix4<f64>], lengths: &[f64]) -> (f64, f64) {
    let pos = |m: &Matrix4<f64>| Vector3::new(m[(0, 3)], m[(1, 3)], m[(2, 3)]);
    let (mut t, mut r, mut n) = (0.0, 0.0, 0usize);
    for &len in lengths {
        for i in 0..gt.len() {
            let mut dist = 0.0;
            let mut end = None;
            for j in i..gt.len() {
                if j > i {
                    dist += (pos(&gt[j]) - pos(&gt[j - 1])).norm();
                }
                if dist >= len {
                    end = Some(j);
                    break;
                }
            }
            let Some(j) = end else { continue };
            let g = gt[i].try_inverse().unwrap() * gt[j];
            let p = pred[i].try_inverse().unwrap() * pred[j];
            let e = g.try_inverse().unwrap() * p;
            t += Vector3::new(e[(0, 3)], e[(1, 3)], e[(2, 3)]).norm() / len;
            r += angle_of(&e) / len;
            n += 1;
        }
    }
    (t / n as f64 * 100.0, r.to_degrees() / n as f64 * 100.0)
}

/// Horn's closed-form absolute orientation (unit quaternions), optionally
/// with scale; returns the RMS residual.
fn brute_ate(pred: &[Vector3<f64>], gt: &[Vector3<f64>], with_scale: bool) -> f64 {
    let n = pred.len() as f64;
    let cp = pred.iter().sum::<Vector3<f64>>() / n;
    let cg = gt.iter().sum::<Vector3<f64>>() / n;
    let mut s = Matrix3::zeros();
    for (p, g) in pred.iter().zip(gt) {
        s += (p - cp) * (g - cg).transpose();
    }
    let (sxx, sxy, sxz) = (s[(0, 0)], s[(0, 1)], s[(0, 2)]);
    let (syx, syy, syz) = (s[(1, 0)], s[(1, 1)], s[(1, 2)]);
    let (szx, szy, szz) = (s[(2, 0)], s[(2, 1)], s[(2, 2)]);
    let nmat = Matrix4::new(
        sxx + syy + szz, syz - szy, szx - sxz, sxy - syx,
        syz - szy, sxx - syy - szz, sxy + syx, szx + sxz,
        szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy,
        sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz,
    );
    let eig = SymmetricEigen::new(nmat);
    let imax = (0..4).max_by(|a, b| eig.eigenvalues[*a].total_cmp(&eig.eigenvalues[*b])).unwrap();
    let q = eig.eigenvectors.column(imax);
    let rot = *UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]))
        .to_rotation_matrix()
        .matrix();
    let scale = if with_scale {
        let num: f64 = pred.iter().zip(gt).map(|(p, g)| (g - cg).dot(&(rot * (p - cp)))).sum();
        let den: f64 = pred.iter().map(|p| (p - cp).norm_squared()).sum();
        num / den
    } else {
        1.0
    };
    let sq: f64 = pred.iter().zip(gt).map(|(p, g)| (scale * rot * (p - cp) + cg - g).norm_squared()).sum();
    (sq / n).sqrt()
}

fn brute_scale_error(pred: &[Matrix4<f64>], gt: &[Matrix4<f64>]) -> f64 {
    let step = |m: &[Matrix4<f64>], i: usize| {
        let d = m[i].try_inverse().unwrap() * m[i + 1];
        Vector3::new(d[(0, 3)], d[(1, 3)], d[(2, 3)]).norm()
    };
    (0..gt.len() - 1)
        .map(|i| (step(pred, i) - step(gt, i)).abs() / step(gt, i))
        .sum::<f64>()
        / (gt.len() - 1) as f64
}

fn random_walk(rng: &mut ChaCha8Rng, n: usize) -> Vec<PoseSE3> {
    (0..n - 1)
        .map(|_| {
            let w = Vector3::new(rng.random_range(-0.02..0.02), rng.random_range(-0.08..0.08), rng.random_range(-0.02..0.02));
            PoseSE3 {
                rotation: *nalgebra::Rotation3::new(w).matrix(),
                translation: Vector3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.05..0.05), rng.random_range(0.8..1.6)),
            }
        })
        .collect()
}

fn criterion_metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let lengths = [10.0, 20.0, 30.0, 40.0];
    let mut worst = 0f64;
    for case in 0..20 {
        let n = rng.random_range(60..120);
        let gt_rel = random_walk(&mut rng, n);
        let pred_rel: Vec<PoseSE3> = gt_rel
            .iter()
            .map(|p| {
                let w = Vector3::new(rng.random_range(-0.01..0.01), rng.random_range(-0.01..0.01), rng.random_range(-0.01..0.01));
                PoseSE3 {
                    rotation: p.rotation * nalgebra::Rotation3::new(w).matrix(),
                    translation: p.translation * rng.random_range(0.85..1.15)
                        + Vector3::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05)),
                }
            })
            .collect();
        let ts: Vec<f64> = (0..n).map(|i| i as f64 * 0.1).collect();
        let gt = accumulate(&gt_rel, &ts).unwrap();
        let pred = accumulate(&pred_rel, &ts).unwrap();
        let align = if case % 2 == 0 { AlignMode::Rigid } else { AlignMode::Sim3 };
        let opts = EvalOptions {
            lengths: lengths.to_vec(),
            s_err_mode: ScaleErrorMode::Rel,
            align,
        };
        let rep = evaluate(&pred, &gt, &opts).unwrap();
        let gm: Vec<Matrix4<f64>> = gt.poses().iter().map(hom).collect();
        let pm: Vec<Matrix4<f64>> = pred.poses().iter().map(hom).collect();
        let (t, r) = brute_drift(&pm, &gm, &lengths);
        let ate = brute_ate(&pred.positions(), &gt.positions(), align == AlignMode::Sim3);
        let s = brute_scale_error(&pm, &gm);
        let dev = |a: f64, b: f64| (a - b).abs() / b.abs().max(1.0);
        worst = worst.max(dev(rep.t_err, t)).max(dev(rep.r_err, r)).max(dev(rep.ate, ate)).max(dev(rep.s_err, s));
    }

    // a straight 1 m-per-step path and its uniform 10% over-scaling
    let steps = vec![PoseSE3::from_translation(Vector3::new(0.0, 0.0, 1.0)); 99];
    let over = vec![PoseSE3::from_translation(Vector3::new(0.0, 0.0, 1.1)); 99];
    let ts: Vec<f64> = (0..100).map(|i| i as f64).collect();
    let gt = accumulate(&steps, &ts).unwrap();
    let pred = accumulate(&over, &ts).unwrap();
    let rep = evaluate(&pred, &gt, &EvalOptions::default()).unwrap();
    let analytic = (rep.t_err - 10.0).abs() <= 1e-6 && (rep.s_err - 0.10).abs() <= 1e-6;
    check(
        worst <= 1e-9 && analytic,
        format!(
            "20 pairs, worst deviation from brute force {worst:.1e}; 10% scaling gives t_err {:.9}%, s_err {:.9}",
            rep.t_err, rep.s_err
        ),
    )
}

// ---------------------------------------------------------------- 6

fn criterion_resampling() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let (mut worst, mut identity) = (0f64, true);
    for s in 0..50 {
        let kind = if s % 2 == 0 { SceneKind::PlaneBoxes } else { SceneKind::PointSprites };
        let mut spec = SceneSpec::desk(700 + s, kind);
        spec.motion.duration = 1.0;
        let (pairs, _) = generate_sequence(&spec).unwrap();
        let k = rng.random_range(2..=4);
        for (j, p) in resample_frequency(&pairs, k).unwrap().iter().enumerate() {
            let m = pairs[k * j..k * (j + 1)].iter().fold(Matrix4::identity(), |acc, q| acc * hom(&q.pose));
            worst = worst.max((hom(&p.pose) - m).amax());
        }
        identity &= resample_frequency(&pairs, 1).unwrap() == pairs;
    }
    check(
        worst <= 1e-9 && identity,
        format!("50 sequences, worst composition deviation {worst:.1e}, k=1 identity: {identity}"),
    )
}

// ---------------------------------------------------------------- 7

fn criterion_time_encoding() -> Outcome {
    let mut worst = 0f64;
    for dt in [1.0 / 12.0, 1.0 / 10.0, 1.0 / 6.0, 1.0 / 4.0] {
        for scales in [2usize, 4, 8] {
            let v = encode_time(dt, scales).unwrap().vector;
            let mut expect = vec![dt];
            expect.extend((0..scales).map(|i| (std::f64::consts::PI * 2f64.powi(i as i32) * dt).sin()));
            expect.extend((0..scales).map(|i| (std::f64::consts::PI * 2f64.powi(i as i32) * dt).cos()));
            if v.len() != expect.len() {
                return Err(format!("encoding length {} for K = {scales}", v.len()));
            }
            worst = v.iter().zip(&expect).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let fm = FeatureMap {
        height: 4,
        width: 4,
        channels: 16,
        data: (0..256).map(|_| rng.random_range(-5.0..5.0)).collect(),
    };
    let cond = TimeCondition::zeros(8, 16);
    let core_identity = condition_features(&fm, &cond.params(&encode_time(0.25, 8).unwrap()).unwrap()).unwrap() == fm;

    let cfg = tavo_model::ModelConfig::default();
    let net = EgomotionNet::new(&cfg, 1).unwrap();
    let dev = candle_core::Device::Cpu;
    let feats = candle_core::Tensor::randn(0f32, 1.0, (2, cfg.tokens(), cfg.dim), &dev).unwrap();
    let time = candle_core::Tensor::randn(0f32, 1.0, (2, cfg.time_dim()), &dev).unwrap();
    let out = net.condition(&feats, &time).unwrap();
    let net_identity = (out - &feats).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap() == 0.0;
    check(
        worst <= 1e-12 && core_identity && net_identity,
        format!("worst encoding deviation {worst:.1e}; zero-initialized conditioning identity: {}", core_identity && net_identity),
    )
}

// ---------------------------------------------------------------- 8 and 9

const SEEDS: [u64; 3] = [1, 2, 3];
const ITERATIONS: usize = 2000;

fn ablation_config(seed: u64, frequencies: &[f64], time_layers: bool) -> TrainConfig {
    let mut cfg = TrainConfig {
        seed,
        iterations: ITERATIONS,
        frequencies: frequencies.to_vec(),
        log_every: 0,
        ..TrainConfig::default()
    };
    cfg.model.dim = 32;
    cfg.model.time_layers = time_layers;
    cfg
}

struct Runs {
    full: Vec<[RateReport; 3]>,
    single: Vec<[RateReport; 3]>,
    mixed_no_time: Vec<[RateReport; 3]>,
}

/// Trains the three variants on the same data for every seed and evaluates
/// each at 12, 3 and 2 Hz (k = 1, 4, 6).
fn ablation_runs() -> Runs {
    let data = DataSpec::default();
    let train_set = data.train_set().unwrap();
    let test_set = data.test_set().unwrap();
    let opts = EvalOptions::default();
    let run = |cfg: TrainConfig| -> [RateReport; 3] {
        let start = Instant::now();
        let net = train(&cfg, &TrainingData { sequences: &train_set }, None).unwrap().net;
        let reports = [1, 4, 6].map(|k| evaluate_sequences(&net, &test_set, k, &opts).unwrap());
        eprintln!(
            "  seed {} {:?} time layers {}: ATE {:.3}/{:.3}/{:.3} m, t_err {:.2}/{:.2}/{:.2}% at k=1/4/6 ({:.0}s)",
            cfg.seed,
            cfg.frequencies,
            cfg.model.time_layers,
            reports[0].ate,
            reports[1].ate,
            reports[2].ate,
            reports[0].t_err,
            reports[1].t_err,
            reports[2].t_err,
            start.elapsed().as_secs_f64()
        );
        reports
    };
    let mut runs = Runs {
        full: Vec::new(),
        single: Vec::new(),
        mixed_no_time: Vec::new(),
    };
    for seed in SEEDS {
        runs.full.push(run(ablation_config(seed, &[12.0, 6.0, 4.0], true)));
        runs.single.push(run(ablation_config(seed, &[12.0], false)));
        runs.mixed_no_time.push(run(ablation_config(seed, &[12.0, 6.0, 4.0], false)));
    }
    runs
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn criterion_rate_robustness(runs: &Runs) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for (slot, hz) in [(1usize, 3), (2, 2)] {
        for (metric, get) in [("ATE", (|r: &RateReport| r.ate) as fn(&RateReport) -> f64), ("t_err", |r: &RateReport| r.t_err)] {
            let gains: Vec<f64> = runs
                .full
                .iter()
                .zip(&runs.single)
                .map(|(a, b)| 1.0 - get(&a[slot]) / get(&b[slot]))
                .collect();
            let all_lower = runs.full.iter().zip(&runs.single).all(|(a, b)| get(&a[slot]) < get(&b[slot]));
            let m = median(gains.clone());
            ok &= all_lower && m >= 0.25;
            parts.push(format!("{hz} Hz {metric} median gain {:.0}% (lower every seed: {all_lower})", 100.0 * m));
        }
    }
    check(ok, parts.join("; "))
}

fn criterion_time_layers(runs: &Runs) -> Outcome {
    let full: Vec<f64> = runs.full.iter().map(|r| r[0].ate).collect();
    let ablated: Vec<f64> = runs.mixed_no_time.iter().map(|r| r[0].ate).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    check(
        mean(&ablated) > mean(&full),
        format!(
            "12 Hz ATE mean over seeds: full {:.3} m {:?}, no time layers {:.3} m {:?}",
            mean(&full),
            full.iter().map(|x| (x * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
            mean(&ablated),
            ablated.iter().map(|x| (x * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        ),
    )
}

// ---------------------------------------------------------------- 10

fn tavo(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_tavo"))
        .args(args)
        .env_remove(tavo_cli::OUT_DIR_ENV)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.code() == Some(0) {
        Ok(())
    } else {
        Err(format!("`tavo {}` exited {:?}: {}", args.join(" "), out.status.code(), String::from_utf8_lossy(&out.stderr)))
    }
}

fn smoke_config() -> String {
    let mut train = TrainConfig {
        batch_size: 4,
        iterations: 100,
        log_every: 10,
        ..TrainConfig::default()
    };
    train.model.dim = 16;
    train.model.heads = 2;
    train.model.flow_blocks = 2;
    train.model.flow3d_blocks = 2;
    train.model.geometry_blocks = 2;
    train.model.head_hidden = 32;
    let run = tavo_cli::RunConfig {
        version: tavo_cli::RUN_CONFIG_VERSION,
        train,
        data: DataSpec {
            seed: 11,
            train_sequences: 2,
            test_sequences: 1,
            duration: Some(3.0),
            ..DataSpec::default()
        },
    };
    toml::to_string(&run).unwrap()
}

fn smoke_pipeline(root: &Path) -> Result<(), String> {
    let p = |name: &str| root.join(name).to_str().unwrap().to_string();
    let mut spec = SceneSpec::desk(99, SceneKind::PlaneBoxes);
    spec.motion.duration = 8.0;
    fs::write(root.join("spec.toml"), spec.to_toml()).map_err(|e| e.to_string())?;
    fs::write(root.join("train.toml"), smoke_config()).map_err(|e| e.to_string())?;
    tavo(&["synth", "gen", "--spec", &p("spec.toml"), "--out", &p("data")])?;
    tavo(&["train", "--config", &p("train.toml"), "--out", &p("run")])?;
    let ckpt = format!("{}/checkpoint.tavo", p("run"));
    tavo(&["infer", "--ckpt", &ckpt, "--data", &p("data"), "--rate", "12", "--out", &p("pred12.txt")])?;
    tavo(&["infer", "--ckpt", &ckpt, "--data", &p("data"), "--rate", "4", "--out", &p("pred4.txt")])?;
    let gt = format!("{}/poses.txt", p("data"));
    tavo(&["eval", "--pred", &p("pred12.txt"), "--gt", &gt, "--out", &p("report12.json"), "--lengths", "5,10"])?;
    tavo(&["eval", "--pred", &p("pred4.txt"), "--gt", &gt, "--out", &p("report4.json"), "--lengths", "5,10", "--align", "sim3"])?;
    tavo(&["plot", "--traj", &gt, &p("pred12.txt"), &p("pred4.txt"), "--out", &p("plot.png")])?;
    Ok(())
}

fn validate_artifacts(root: &Path) -> Result<(), String> {
    let e = |x: &dyn std::fmt::Display| x.to_string();
    let ds = tavo_core::io::read_dataset(&root.join("data")).map_err(|x| e(&x))?;
    let (net, header) = tavo_model::checkpoint::load_checkpoint(&root.join("run/checkpoint.tavo")).map_err(|x| e(&x))?;
    if header.train.map(|t| t.iterations) != Some(100) || net.config.dim != 16 {
        return Err("checkpoint header does not carry the training config".into());
    }
    let log = fs::read_to_string(root.join("run/train_log.jsonl")).map_err(|x| e(&x))?;
    let records: Vec<tavo_model::train::LogRecord> =
        log.lines().map(serde_json::from_str).collect::<Result<_, _>>().map_err(|x| e(&x))?;
    if records.is_empty() || records.last().unwrap().iteration != 99 {
        return Err("training log incomplete".into());
    }
    for (name, n) in [("pred12.txt", ds.pairs.len() + 1), ("pred4.txt", ds.pairs.len() / 3 + 1)] {
        let t: Trajectory = tavo_core::io::read_trajectory(&root.join(name), 1.0).map_err(|x| e(&x))?;
        if t.len() != n {
            return Err(format!("{name} has {} poses, expected {n}", t.len()));
        }
    }
    for name in ["report12.json", "report4.json"] {
        let r: tavo_core::metrics::EvalReport =
            serde_json::from_slice(&fs::read(root.join(name)).map_err(|x| e(&x))?).map_err(|x| e(&x))?;
        if ![r.t_err, r.r_err, r.ate, r.s_err].iter().all(|x| x.is_finite()) {
            return Err(format!("{name} has non-finite metrics"));
        }
    }
    let img = image::open(root.join("plot.png")).map_err(|x| e(&x))?;
    if img.width() == 0 {
        return Err("empty plot".into());
    }
    Ok(())
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn criterion_smoke() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    smoke_pipeline(a.path())?;
    validate_artifacts(a.path())?;
    smoke_pipeline(b.path())?;
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    let differing: Vec<&String> = ta.iter().zip(&tb).filter(|(x, y)| x != y).map(|(x, _)| &x.0).collect();
    check(
        ta.len() == tb.len() && differing.is_empty(),
        format!("gen, train, infer, eval and plot exit 0; {} artifacts valid; differing across runs: {differing:?}", ta.len()),
    )
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let filter = args.iter().skip(1).find(|a| !a.starts_with('-')).and_then(|a| a.parse::<usize>().ok());
    let want = |n: usize| filter.is_none_or(|f| f == n);

    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut record = |n: usize, name: &'static str, f: &dyn Fn() -> Outcome| {
        if want(n) {
            let start = Instant::now();
            let outcome = f();
            let status = if outcome.is_ok() { "PASS" } else { "FAIL" };
            let detail = match &outcome {
                Ok(d) | Err(d) => d.clone(),
            };
            println!("criterion {n:>2} [{status}] {name}: {detail} ({:.0}s)", start.elapsed().as_secs_f64());
            results.push((n, name, outcome));
        }
    };
    record(1, "differentiable flow gradients", &criterion_flow_gradients);
    record(2, "geometry oracle", &criterion_geometry_oracle);
    record(3, "back-projection consistency", &criterion_back_projection);
    record(4, "Fisher mode", &criterion_fisher_mode);
    record(5, "metric oracles", &criterion_metrics);
    record(6, "resampling contract", &criterion_resampling);
    record(7, "time encoding", &criterion_time_encoding);
    if want(8) || want(9) {
        let runs = ablation_runs();
        record(8, "unseen-rate robustness", &|| criterion_rate_robustness(&runs));
        record(9, "time layers at base rate", &|| criterion_time_layers(&runs));
    }
    record(10, "end-to-end smoke", &criterion_smoke);

    let failed = results.iter().filter(|r| r.2.is_err()).count();
    println!("acceptance: {} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
