//! Differentiable 2D-guided 3D flow.
//!
//! Each pixel of frame 1 is lifted with its depth, moved by the 2D flow to a
//! sub-pixel location in frame 2, where the frame-2 depth is bilinearly
//! sampled and lifted again. The per-pixel difference of the two lifted
//! points is a metric motion vector in camera coordinates. The validity mask
//! is piecewise constant and treated as a constant in the backward pass.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geometry::CameraIntrinsics;

/// Row-major `H×W` map of scalars.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    /// Metric depth; `0` marks an invalid pixel.
    pub data: Vec<f64>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::shape(format!(
                "depth data has {} values, expected {}x{}",
                data.len(),
                width,
                height
            )));
        }
        if data.iter().any(|d| !(*d >= 0.0) || !d.is_finite()) {
            return Err(Error::domain("depth values must be finite and non-negative"));
        }
        Ok(DepthMap {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        DepthMap {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    #[inline]
    pub fn at(&self, u: usize, v: usize) -> f64 {
        self.data[v * self.width + u]
    }
}

/// Per-pixel displacement in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField2D {
    pub width: usize,
    pub height: usize,
    pub dx: Vec<f64>,
    pub dy: Vec<f64>,
}

impl FlowField2D {
    pub fn new(width: usize, height: usize, dx: Vec<f64>, dy: Vec<f64>) -> Result<Self> {
        if dx.len() != width * height || dy.len() != width * height {
            return Err(Error::shape(format!(
                "flow components have {}/{} values, expected {}",
                dx.len(),
                dy.len(),
                width * height
            )));
        }
        if dx.iter().chain(dy.iter()).any(|x| !x.is_finite()) {
            return Err(Error::domain("flow must be finite"));
        }
        Ok(FlowField2D {
            width,
            height,
            dx,
            dy,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        FlowField2D {
            width,
            height,
            dx: vec![0.0; width * height],
            dy: vec![0.0; width * height],
        }
    }

    pub fn constant(width: usize, height: usize, dx: f64, dy: f64) -> Self {
        FlowField2D {
            width,
            height,
            dx: vec![dx; width * height],
            dy: vec![dy; width * height],
        }
    }
}

/// Sub-pixel sampling locations `(u′, v′)` per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingGrid {
    pub width: usize,
    pub height: usize,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Flow3DField {
    pub width: usize,
    pub height: usize,
    pub motion: Vec<Vector3<f64>>,
    pub mask: Vec<bool>,
}

impl Flow3DField {
    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

/// `g(u, v) = (u + F_x, v + F_y)`, unclamped.
pub fn warp_grid(flow: &FlowField2D) -> SamplingGrid {
    let (w, h) = (flow.width, flow.height);
    let mut u = Vec::with_capacity(w * h);
    let mut v = Vec::with_capacity(w * h);
    for row in 0..h {
        for col in 0..w {
            let i = row * w + col;
            u.push(col as f64 + flow.dx[i]);
            v.push(row as f64 + flow.dy[i]);
        }
    }
    SamplingGrid {
        width: w,
        height: h,
        u,
        v,
    }
}

/// Bilinear stencil at one sampling location.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Stencil {
    u0: i64,
    v0: i64,
    gamma: f64,
    psi: f64,
}

impl Stencil {
    fn at(u: f64, v: f64) -> Self {
        let u0 = u.floor();
        let v0 = v.floor();
        Stencil {
            u0: u0 as i64,
            v0: v0 as i64,
            gamma: u - u0,
            psi: v - v0,
        }
    }

    /// Weights for neighbors `(u0, v0), (u0, v0+1), (u0+1, v0), (u0+1, v0+1)`.
    fn weights(&self) -> [f64; 4] {
        let (g, p) = (self.gamma, self.psi);
        [(1.0 - g) * (1.0 - p), (1.0 - g) * p, g * (1.0 - p), g * p]
    }

    fn offsets() -> [(i64, i64); 4] {
        [(0, 0), (0, 1), (1, 0), (1, 1)]
    }
}

/// Samples `depth` at every grid location. Neighbors outside the image read
/// as zero; such pixels are masked downstream.
pub fn bilinear_sample(depth: &DepthMap, grid: &SamplingGrid) -> Result<Vec<f64>> {
    if depth.width != grid.width || depth.height != grid.height {
        return Err(Error::shape("grid and depth map sizes differ"));
    }
    let (w, h) = (depth.width as i64, depth.height as i64);
    let read = |u: i64, v: i64| {
        if u >= 0 && v >= 0 && u < w && v < h {
            depth.data[(v * w + u) as usize]
        } else {
            0.0
        }
    };
    Ok(grid
        .u
        .iter()
        .zip(&grid.v)
        .map(|(&u, &v)| {
            let s = Stencil::at(u, v);
            s.weights()
                .iter()
                .zip(Stencil::offsets())
                .map(|(wt, (du, dv))| wt * read(s.u0 + du, s.v0 + dv))
                .sum()
        })
        .collect())
}

/// Stateless forward pass.
pub fn flow3d_forward(
    d1: &DepthMap,
    d2: &DepthMap,
    flow: &FlowField2D,
    k: &CameraIntrinsics,
) -> Result<Flow3DField> {
    Flow3dLayer::new().forward(d1, d2, flow, k)
}

#[derive(Debug, Clone)]
struct PixelState {
    stencil: Stencil,
    neighbors: [f64; 4],
    sampled: f64,
    ray1: Vector3<f64>,
    ray2: Vector3<f64>,
}

#[derive(Debug, Clone)]
struct ForwardState {
    width: usize,
    height: usize,
    k: CameraIntrinsics,
    pixels: Vec<Option<PixelState>>,
}

/// Gradients of a scalar loss with respect to the layer inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Flow3dGrads {
    pub depth1: Vec<f64>,
    pub depth2: Vec<f64>,
    pub flow_x: Vec<f64>,
    pub flow_y: Vec<f64>,
}

/// 3D flow layer retaining the forward state needed by [`Flow3dLayer::backward`].
///
/// One instance serves one forward/backward pair at a time.
#[derive(Debug, Clone, Default)]
pub struct Flow3dLayer {
    state: Option<ForwardState>,
}

impl Flow3dLayer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward(
        &mut self,
        d1: &DepthMap,
        d2: &DepthMap,
        flow: &FlowField2D,
        k: &CameraIntrinsics,
    ) -> Result<Flow3DField> {
        let (w, h) = (d1.width, d1.height);
        if (d2.width, d2.height) != (w, h) || (flow.width, flow.height) != (w, h) {
            return Err(Error::shape(format!(
                "depth1 {}x{}, depth2 {}x{}, flow {}x{}",
                w, h, d2.width, d2.height, flow.width, flow.height
            )));
        }
        if (k.width, k.height) != (w, h) {
            return Err(Error::shape(format!(
                "intrinsics are for {}x{}, maps are {}x{}",
                k.width, k.height, w, h
            )));
        }
        let grid = warp_grid(flow);
        let mut motion = vec![Vector3::zeros(); w * h];
        let mut mask = vec![false; w * h];
        let mut pixels = Vec::with_capacity(w * h);
        for row in 0..h {
            for col in 0..w {
                let i = row * w + col;
                let state = self.pixel(d1.data[i], d2, grid.u[i], grid.v[i], col, row, k);
                if let Some(ps) = &state {
                    motion[i] = ps.ray2 * ps.sampled - ps.ray1 * d1.data[i];
                    mask[i] = true;
                }
                pixels.push(state);
            }
        }
        self.state = Some(ForwardState {
            width: w,
            height: h,
            k: *k,
            pixels,
        });
        Ok(Flow3DField {
            width: w,
            height: h,
            motion,
            mask,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn pixel(
        &self,
        depth1: f64,
        d2: &DepthMap,
        u: f64,
        v: f64,
        col: usize,
        row: usize,
        k: &CameraIntrinsics,
    ) -> Option<PixelState> {
        if !(depth1 > 0.0) {
            return None;
        }
        let stencil = Stencil::at(u, v);
        let weights = stencil.weights();
        let (w, h) = (d2.width as i64, d2.height as i64);
        let mut neighbors = [0.0; 4];
        for ((n, wt), (du, dv)) in neighbors.iter_mut().zip(&weights).zip(Stencil::offsets()) {
            let (nu, nv) = (stencil.u0 + du, stencil.v0 + dv);
            let inside = nu >= 0 && nv >= 0 && nu < w && nv < h;
            if inside {
                *n = d2.at(nu as usize, nv as usize);
            }
            // Zero-weight neighbors are not part of the stencil. Every other
            // neighbor must be inside the image with valid depth: zero encodes
            // missing depth and interpolating toward it would fabricate geometry.
            if *wt > 0.0 && !(inside && *n > 0.0) {
                return None;
            }
        }
        let sampled: f64 = weights.iter().zip(&neighbors).map(|(a, b)| a * b).sum();
        if !(sampled > 0.0) {
            return None;
        }
        Some(PixelState {
            stencil,
            neighbors,
            sampled,
            ray1: k.ray(col as f64, row as f64),
            ray2: k.ray(u, v),
        })
    }

    /// Backpropagates `dL/dS` (one vector per pixel) to depths and flow.
    pub fn backward(&self, grad_motion: &[Vector3<f64>]) -> Result<Flow3dGrads> {
        let st = self
            .state
            .as_ref()
            .ok_or_else(|| Error::State("backward called before forward".into()))?;
        let n = st.width * st.height;
        if grad_motion.len() != n {
            return Err(Error::shape(format!(
                "upstream gradient has {} entries, expected {n}",
                grad_motion.len()
            )));
        }
        let mut g = Flow3dGrads {
            depth1: vec![0.0; n],
            depth2: vec![0.0; n],
            flow_x: vec![0.0; n],
            flow_y: vec![0.0; n],
        };
        let k = &st.k;
        for (i, (ps, gs)) in st.pixels.iter().zip(grad_motion).enumerate() {
            let Some(ps) = ps else { continue };
            // S = D̃₂ r₂(u′, v′) − D₁ r₁
            g.depth1[i] = -gs.dot(&ps.ray1);
            let g_sampled = gs.dot(&ps.ray2);
            let [d00, d01, d10, d11] = ps.neighbors;
            let (gam, psi) = (ps.stencil.gamma, ps.stencil.psi);
            let dd_du = (1.0 - psi) * (d10 - d00) + psi * (d11 - d01);
            let dd_dv = (1.0 - gam) * (d01 - d00) + gam * (d11 - d10);
            g.flow_x[i] = gs.x * ps.sampled / k.fu + g_sampled * dd_du;
            g.flow_y[i] = gs.y * ps.sampled / k.fv + g_sampled * dd_dv;
            for (wt, (du, dv)) in ps.stencil.weights().iter().zip(Stencil::offsets()) {
                if *wt == 0.0 {
                    continue;
                }
                let q = (ps.stencil.v0 + dv) as usize * st.width + (ps.stencil.u0 + du) as usize;
                g.depth2[q] += g_sampled * wt;
            }
        }
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k16() -> CameraIntrinsics {
        CameraIntrinsics::new(14.0, 15.0, 7.5, 7.25, 16, 16).unwrap()
    }

    #[test]
    fn zero_flow_grid_is_base_grid() {
        let g = warp_grid(&FlowField2D::zeros(5, 4));
        for row in 0..4 {
            for col in 0..5 {
                assert_eq!(g.u[row * 5 + col], col as f64);
                assert_eq!(g.v[row * 5 + col], row as f64);
            }
        }
    }

    #[test]
    fn constant_flow_shifts_grid() {
        let g = warp_grid(&FlowField2D::constant(6, 3, 3.5, -1.25));
        for row in 0..3 {
            for col in 0..6 {
                assert_eq!(g.u[row * 6 + col], col as f64 + 3.5);
                assert_eq!(g.v[row * 6 + col], row as f64 - 1.25);
            }
        }
    }

    #[test]
    fn random_flow_grid_offsets() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = 7 * 9;
        let dx: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let dy: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let f = FlowField2D::new(7, 9, dx.clone(), dy.clone()).unwrap();
        let g = warp_grid(&f);
        for i in 0..n {
            assert!((g.u[i] - (i % 7) as f64 - dx[i]).abs() < 1e-14);
            assert!((g.v[i] - (i / 7) as f64 - dy[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn sampling_at_integers_reads_pixels() {
        let d = DepthMap::new(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let grid = SamplingGrid {
            width: 3,
            height: 2,
            u: vec![0.0, 1.0, 2.0, 0.0, 1.0, 2.0],
            v: vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0],
        };
        assert_eq!(bilinear_sample(&d, &grid).unwrap(), d.data);
    }

    #[test]
    fn sampling_midpoint_averages() {
        let d = DepthMap::new(2, 2, vec![2.0, 4.0, 2.0, 4.0]).unwrap();
        let grid = SamplingGrid {
            width: 2,
            height: 2,
            u: vec![0.5; 4],
            v: vec![0.0; 4],
        };
        assert_eq!(bilinear_sample(&d, &grid).unwrap(), vec![3.0; 4]);
    }

    #[test]
    fn sampling_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (w, h) = (13, 9);
        let d = DepthMap::new(w, h, (0..w * h).map(|_| rng.random_range(0.5..20.0)).collect()).unwrap();
        let gu: Vec<f64> = (0..w * h).map(|_| rng.random_range(-2.0..w as f64 + 1.0)).collect();
        let gv: Vec<f64> = (0..w * h).map(|_| rng.random_range(-2.0..h as f64 + 1.0)).collect();
        let grid = SamplingGrid {
            width: w,
            height: h,
            u: gu.clone(),
            v: gv.clone(),
        };
        let got = bilinear_sample(&d, &grid).unwrap();
        for i in 0..w * h {
            // naive reference: sum over the 2×2 neighborhood with explicit weights
            let (x, y) = (gu[i], gv[i]);
            let (x0, y0) = (x.floor(), y.floor());
            let mut acc = 0.0;
            for a in 0..2 {
                for b in 0..2 {
                    let (xi, yj) = (x0 + a as f64, y0 + b as f64);
                    let wx = 1.0 - (x - xi).abs();
                    let wy = 1.0 - (y - yj).abs();
                    if xi >= 0.0 && yj >= 0.0 && xi < w as f64 && yj < h as f64 {
                        acc += wx * wy * d.at(xi as usize, yj as usize);
                    }
                }
            }
            assert!((got[i] - acc).abs() < 1e-12, "pixel {i}: {} vs {acc}", got[i]);
        }
    }

    #[test]
    fn zero_flow_equal_depths_gives_zero_motion() {
        let k = k16();
        let mut d = DepthMap::filled(16, 16, 3.0);
        d.data[5] = 0.0;
        let f = flow3d_forward(&d, &d, &FlowField2D::zeros(16, 16), &k).unwrap();
        assert!(f.motion.iter().all(|m| *m == Vector3::zeros()));
        for i in 0..256 {
            assert_eq!(f.mask[i], i != 5);
        }
    }

    #[test]
    fn flow_out_of_image_masks_everything() {
        let k = k16();
        let d = DepthMap::filled(16, 16, 3.0);
        let f = flow3d_forward(&d, &d, &FlowField2D::constant(16, 16, 40.0, 0.0), &k).unwrap();
        assert_eq!(f.valid_count(), 0);
        assert!(f.motion.iter().all(|m| *m == Vector3::zeros()));
    }

    #[test]
    fn scaled_target_depth_moves_along_z() {
        let k = k16();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d1 = DepthMap::new(16, 16, (0..256).map(|_| rng.random_range(1.0..9.0)).collect()).unwrap();
        let s = 1.7;
        let d2 = DepthMap::new(16, 16, d1.data.iter().map(|d| d * s).collect()).unwrap();
        let f = flow3d_forward(&d1, &d2, &FlowField2D::zeros(16, 16), &k).unwrap();
        for (i, m) in f.motion.iter().enumerate() {
            if f.mask[i] {
                assert!((m.z - (s - 1.0) * d1.data[i]).abs() < 1e-12);
            } else {
                assert_eq!(*m, Vector3::zeros());
            }
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let k = k16();
        let d = DepthMap::filled(16, 16, 1.0);
        let e = DepthMap::filled(8, 16, 1.0);
        assert!(matches!(
            flow3d_forward(&d, &e, &FlowField2D::zeros(16, 16), &k),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn backward_before_forward_is_state_error() {
        let layer = Flow3dLayer::new();
        assert!(matches!(layer.backward(&[]), Err(Error::State(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let k = k16();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d1 = DepthMap::new(16, 16, (0..256).map(|_| rng.random_range(1.0..9.0)).collect()).unwrap();
        let flow = FlowField2D::new(
            16,
            16,
            (0..256).map(|_| rng.random_range(-2.0..2.0)).collect(),
            (0..256).map(|_| rng.random_range(-2.0..2.0)).collect(),
        )
        .unwrap();
        let mut layer = Flow3dLayer::new();
        layer.forward(&d1, &d1, &flow, &k).unwrap();
        let g = layer.backward(&vec![Vector3::zeros(); 256]).unwrap();
        for v in [&g.depth1, &g.depth2, &g.flow_x, &g.flow_y] {
            assert!(v.iter().all(|x| *x == 0.0));
        }
    }
}
