//! Matrix Fisher distribution on SO(3): mode, normalizing constant and the
//! negative log-likelihood used to supervise rotations.
//!
//! The density is `p(R | F) = exp(tr(Fᵀ R)) / c(F)` with respect to the
//! normalized Haar measure. `c(F)` depends only on the proper singular values
//! `s₁ ≥ s₂ ≥ |s₃|` (with `sign(s₃) = sign(det F)`) and reduces to
//!
//! ```text
//! c(S) = ∫₋₁¹ ½ I₀(½(s₁ − s₂)(1 − u)) I₀(½(s₁ + s₂)(1 + u)) exp(s₃ u) du
//! ```

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

/// Absolute error target of the scaled normalizer integrals.
const QUAD_TOL: f64 = 1e-14;

/// Signed SVD `F = U diag(s) Vᵀ` with `U, V ∈ SO(3)` and `s₁ ≥ s₂ ≥ |s₃|`.
#[derive(Debug, Clone, Copy)]
pub struct ProperSvd {
    pub u: Matrix3<f64>,
    pub s: Vector3<f64>,
    pub v: Matrix3<f64>,
}

pub fn proper_svd(f: &Matrix3<f64>) -> Result<ProperSvd> {
    if !f.iter().all(|x| x.is_finite()) {
        return Err(Error::domain("Fisher parameter must be finite"));
    }
    let svd = f.svd(true, true);
    let (u, vt) = (svd.u.expect("svd u"), svd.v_t.expect("svd v_t"));
    let mut order = [0usize, 1, 2];
    order.sort_by(|a, b| svd.singular_values[*b].total_cmp(&svd.singular_values[*a]));
    let mut uu = Matrix3::zeros();
    let mut vv = Matrix3::zeros();
    let mut s = Vector3::zeros();
    for (dst, &src) in order.iter().enumerate() {
        uu.set_column(dst, &u.column(src));
        vv.set_column(dst, &vt.row(src).transpose());
        s[dst] = svd.singular_values[src];
    }
    if uu.determinant() < 0.0 {
        uu.column_mut(2).neg_mut();
        s[2] = -s[2];
    }
    if vv.determinant() < 0.0 {
        vv.column_mut(2).neg_mut();
        s[2] = -s[2];
    }
    Ok(ProperSvd { u: uu, s, v: vv })
}

#[derive(Debug, Clone, Copy)]
pub struct FisherMode {
    pub rotation: Matrix3<f64>,
    /// The maximizer of `tr(Rᵀ F)` is not unique; `rotation` is one of them.
    pub degenerate: bool,
}

/// Mode of the matrix Fisher distribution, `argmax_R tr(Rᵀ F)`.
pub fn fisher_mode(f: &Matrix3<f64>) -> Result<FisherMode> {
    let p = proper_svd(f)?;
    let rotation = p.u * p.v.transpose();
    let scale = p.s[0].abs().max(f64::MIN_POSITIVE);
    // Ties between the two smallest singular values only matter when the
    // determinant correction is active or the parameter is (near) zero.
    let tie = (p.s[1] - p.s[2].abs()).abs() <= 1e-12 * scale;
    let degenerate = (tie && p.s[2] <= 0.0) || p.s[0] <= f64::MIN_POSITIVE;
    if degenerate {
        log::debug!("degenerate Fisher parameter, singular values {:?}", p.s.as_slice());
    }
    Ok(FisherMode {
        rotation,
        degenerate,
    })
}

/// Exponentially scaled modified Bessel functions `e^{−x} I₀(x)`, `e^{−x} I₁(x)`
/// for `x ≥ 0`.
pub fn bessel_i0e_i1e(x: f64) -> (f64, f64) {
    debug_assert!(x >= 0.0);
    if x <= 25.0 {
        let q = x * x / 4.0;
        let (mut t0, mut t1) = (1.0, x / 2.0);
        let (mut s0, mut s1) = (t0, t1);
        for k in 1..200 {
            let k = k as f64;
            t0 *= q / (k * k);
            t1 *= q / (k * (k + 1.0));
            s0 += t0;
            s1 += t1;
            if t0 < 1e-17 * s0 && t1 <= 1e-17 * s1 {
                break;
            }
        }
        let e = (-x).exp();
        (s0 * e, s1 * e)
    } else {
        let asym = |nu2: f64| {
            let (mut term, mut sum) = (1.0f64, 1.0f64);
            for k in 1..60 {
                let j = (2 * k - 1) as f64;
                let next = term * (j * j - nu2) / (8.0 * k as f64 * x);
                if next.abs() >= term.abs() || next.abs() < 1e-17 * sum.abs() {
                    sum += next;
                    break;
                }
                term = next;
                sum += term;
            }
            sum / (2.0 * std::f64::consts::PI * x).sqrt()
        };
        (asym(0.0), asym(4.0))
    }
}

/// `log c(S)` and its gradient with respect to the proper singular values.
pub fn log_normalizer(s: &Vector3<f64>) -> Result<(f64, Vector3<f64>)> {
    let (s1, s2, s3) = (s[0], s[1], s[2]);
    if !(s1 >= s2 && s2 >= s3.abs() - 1e-12 * s1.abs().max(1.0)) || !s.iter().all(|x| x.is_finite()) {
        return Err(Error::domain(format!(
            "expected proper singular values s1 >= s2 >= |s3|, got {:?}",
            s.as_slice()
        )));
    }
    let a = 0.5 * (s1 - s2);
    let b = 0.5 * (s1 + s2);
    let c = s2 + s3;
    // integrand scaled by exp(−(s1 + s2 + s3)); its exponent peaks at u = 1
    let parts = |u: f64| {
        let (i0a, i1a) = bessel_i0e_i1e((a * (1.0 - u)).max(0.0));
        let (i0b, i1b) = bessel_i0e_i1e((b * (1.0 + u)).max(0.0));
        let e = 0.5 * (c * (u - 1.0)).exp();
        let g = e * i0a * i0b;
        let da = e * i1a * i0b * 0.5 * (1.0 - u);
        let db = e * i0a * i1b * 0.5 * (1.0 + u);
        (g, da + db, db - da, u * g)
    };
    let integrate = |pick: fn((f64, f64, f64, f64)) -> f64| {
        quadrature::double_exponential::integrate(|u| pick(parts(u)), -1.0, 1.0, QUAD_TOL).integral
    };
    let z = integrate(|p| p.0);
    if !(z > 0.0) {
        return Err(Error::domain("normalizer integral underflowed"));
    }
    let grad = Vector3::new(integrate(|p| p.1), integrate(|p| p.2), integrate(|p| p.3)) / z;
    Ok((s1 + s2 + s3 + z.ln(), grad))
}

/// `log c(F)` and `∂ log c / ∂F = U diag(∂ log c / ∂s) Vᵀ`.
pub fn log_normalizer_matrix(f: &Matrix3<f64>) -> Result<(f64, Matrix3<f64>)> {
    let p = proper_svd(f)?;
    let (value, ds) = log_normalizer(&p.s)?;
    Ok((value, p.u * Matrix3::from_diagonal(&ds) * p.v.transpose()))
}

/// Negative log-likelihood `−tr(R_gtᵀ F) + log c(F)` and its gradient in `F`.
pub fn fisher_nll(f: &Matrix3<f64>, target: &Matrix3<f64>) -> Result<(f64, Matrix3<f64>)> {
    let (log_c, grad_c) = log_normalizer_matrix(f)?;
    Ok(((-target.transpose() * f).trace() + log_c, grad_c - target))
}
