//! Tensor ops with hand-written backward passes: the 2D-guided 3D flow layer
//! and the matrix-Fisher negative log-likelihood.

use candle_core::{CpuStorage, CustomOp2, CustomOp3, Layout, Shape, Tensor};
use nalgebra::{Matrix3, Vector3};
use tavo_core::fisher::fisher_nll;
use tavo_core::flow3d::{DepthMap, Flow3dLayer, FlowField2D};
use tavo_core::CameraIntrinsics;

fn slice<'a>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<&'a [f32]> {
    let data = s.as_slice::<f32>()?;
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("custom op expects contiguous inputs"),
    }
}

fn wrap(e: tavo_core::Error) -> candle_core::Error {
    candle_core::Error::Msg(e.to_string())
}

struct Sample {
    d1: DepthMap,
    d2: DepthMap,
    flow: FlowField2D,
    k: CameraIntrinsics,
}

fn samples(depths: &[f32], flow: &[f32], k: &[f32], b: usize, h: usize, w: usize) -> candle_core::Result<Vec<Sample>> {
    let n = h * w;
    (0..b)
        .map(|i| {
            let d = &depths[i * 2 * n..(i + 1) * 2 * n];
            let f = &flow[i * 2 * n..(i + 1) * 2 * n];
            let c = &k[i * 4..i * 4 + 4];
            let k = CameraIntrinsics {
                fu: c[0] as f64,
                fv: c[1] as f64,
                cu: c[2] as f64,
                cv: c[3] as f64,
                width: w,
                height: h,
            };
            let to64 = |x: &[f32]| x.iter().map(|v| *v as f64).collect::<Vec<_>>();
            Ok(Sample {
                d1: DepthMap::new(w, h, to64(&d[..n])).map_err(wrap)?,
                d2: DepthMap::new(w, h, to64(&d[n..])).map_err(wrap)?,
                flow: FlowField2D::new(w, h, to64(&f[..n]), to64(&f[n..])).map_err(wrap)?,
                k,
            })
        })
        .collect()
}

/// Inputs: depths `(B, 2, H, W)` (frame 1, frame 2), flow `(B, 2, H, W)`
/// (dx, dy), intrinsics `(B, 4)` (f_U, f_V, c_U, c_V). Output `(B, 4, H, W)`:
/// the masked motion `m·S` in channels 0–2 and the mask in channel 3.
/// The mask is piecewise constant and receives no gradient; intrinsics are
/// treated as constants.
pub struct Flow3dOp;

impl CustomOp3 for Flow3dOp {
    fn name(&self) -> &'static str {
        "flow3d"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = l1.shape().dims4()?;
        if c != 2 || l2.shape().dims() != [b, 2, h, w] || l3.shape().dims() != [b, 4] {
            candle_core::bail!("flow3d shapes {:?} {:?} {:?}", l1.shape(), l2.shape(), l3.shape());
        }
        let n = h * w;
        let mut out = vec![0f32; b * 4 * n];
        for (i, s) in samples(slice(s1, l1)?, slice(s2, l2)?, slice(s3, l3)?, b, h, w)?.iter().enumerate() {
            let field = Flow3dLayer::new().forward(&s.d1, &s.d2, &s.flow, &s.k).map_err(wrap)?;
            let o = &mut out[i * 4 * n..(i + 1) * 4 * n];
            for p in 0..n {
                if field.mask[p] {
                    let m = field.motion[p];
                    o[p] = m.x as f32;
                    o[n + p] = m.y as f32;
                    o[2 * n + p] = m.z as f32;
                    o[3 * n + p] = 1.0;
                }
            }
        }
        Ok((CpuStorage::F32(out), Shape::from((b, 4, h, w))))
    }

    fn bwd(
        &self,
        depths: &Tensor,
        flow: &Tensor,
        k: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (b, _, h, w) = depths.dims4()?;
        let n = h * w;
        let flat = |t: &Tensor| t.flatten_all()?.to_vec1::<f32>();
        let (dv, fv, kv, gv) = (flat(depths)?, flat(flow)?, flat(k)?, flat(grad)?);
        let mut gd = vec![0f32; b * 2 * n];
        let mut gf = vec![0f32; b * 2 * n];
        for (i, s) in samples(&dv, &fv, &kv, b, h, w)?.iter().enumerate() {
            let mut layer = Flow3dLayer::new();
            layer.forward(&s.d1, &s.d2, &s.flow, &s.k).map_err(wrap)?;
            let g = &gv[i * 4 * n..(i + 1) * 4 * n];
            let up: Vec<Vector3<f64>> = (0..n)
                .map(|p| Vector3::new(g[p] as f64, g[n + p] as f64, g[2 * n + p] as f64))
                .collect();
            let grads = layer.backward(&up).map_err(wrap)?;
            let (od, of) = (&mut gd[i * 2 * n..(i + 1) * 2 * n], &mut gf[i * 2 * n..(i + 1) * 2 * n]);
            for p in 0..n {
                od[p] = grads.depth1[p] as f32;
                od[n + p] = grads.depth2[p] as f32;
                of[p] = grads.flow_x[p] as f32;
                of[n + p] = grads.flow_y[p] as f32;
            }
        }
        let dev = depths.device();
        Ok((
            Some(Tensor::from_vec(gd, (b, 2, h, w), dev)?),
            Some(Tensor::from_vec(gf, (b, 2, h, w), dev)?),
            None,
        ))
    }
}

pub fn flow3d(depths: &Tensor, flow: &Tensor, intrinsics: &Tensor) -> candle_core::Result<Tensor> {
    depths
        .contiguous()?
        .apply_op3(&flow.contiguous()?, &intrinsics.contiguous()?, Flow3dOp)
}

fn mat(v: &[f32]) -> Matrix3<f64> {
    Matrix3::from_row_slice(&v.iter().map(|x| *x as f64).collect::<Vec<_>>())
}

/// Per-sample `−tr(R_gtᵀ F) + log c(F)`. Inputs `(B, 9)` row-major F and
/// `(B, 9)` row-major target rotations; output `(B,)`. Gradient
/// `∂log c/∂F − R_gt` (no gradient to the target).
pub struct FisherNllOp;

impl CustomOp2 for FisherNllOp {
    fn name(&self) -> &'static str {
        "fisher_nll"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, nine) = l1.shape().dims2()?;
        if nine != 9 || l2.shape().dims() != [b, 9] {
            candle_core::bail!("fisher_nll shapes {:?} {:?}", l1.shape(), l2.shape());
        }
        let (f, r) = (slice(s1, l1)?, slice(s2, l2)?);
        let out = (0..b)
            .map(|i| {
                let (v, _) = fisher_nll(&mat(&f[i * 9..i * 9 + 9]), &mat(&r[i * 9..i * 9 + 9])).map_err(wrap)?;
                Ok(v as f32)
            })
            .collect::<candle_core::Result<Vec<f32>>>()?;
        Ok((CpuStorage::F32(out), Shape::from(b)))
    }

    fn bwd(&self, f: &Tensor, r: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let b = f.dims2()?.0;
        let fv = f.flatten_all()?.to_vec1::<f32>()?;
        let rv = r.flatten_all()?.to_vec1::<f32>()?;
        let gv = grad.flatten_all()?.to_vec1::<f32>()?;
        let mut out = Vec::with_capacity(b * 9);
        for i in 0..b {
            let (_, g) = fisher_nll(&mat(&fv[i * 9..i * 9 + 9]), &mat(&rv[i * 9..i * 9 + 9])).map_err(wrap)?;
            for row in 0..3 {
                for col in 0..3 {
                    out.push((g[(row, col)] * gv[i] as f64) as f32);
                }
            }
        }
        Ok((Some(Tensor::from_vec(out, (b, 9), f.device())?), None))
    }
}

pub fn fisher_nll_loss(f: &Tensor, target: &Tensor) -> candle_core::Result<Tensor> {
    f.contiguous()?.apply_op2(&target.contiguous()?, FisherNllOp)
}
