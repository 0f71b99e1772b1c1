//! Classical single-scale TV-L1 with fixed parameters and fixed stencils.
//!
//! This solver is deliberately written as plain per-pixel loops with
//! hard-coded stencils and shares no code with [`crate::layer`], so the
//! differentiable layer can be checked against it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{DualField, FlowField};
use crate::tensor::{FeatureMap, Real};

pub const DEFAULT_TAU: f64 = 0.25;
pub const DEFAULT_LAMBDA: f64 = 0.15;
pub const DEFAULT_THETA: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TvParams {
    /// time step of the dual update
    pub tau: f64,
    /// weight of the data term
    pub lambda: f64,
    /// coupling between `u` and the auxiliary `v`
    pub theta: f64,
}

impl Default for TvParams {
    fn default() -> Self {
        TvParams {
            tau: DEFAULT_TAU,
            lambda: DEFAULT_LAMBDA,
            theta: DEFAULT_THETA,
        }
    }
}

impl TvParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("tau", self.tau),
            ("lambda", self.lambda),
            ("theta", self.theta),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!(
                    "{name} must be finite and > 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Image-gradient stencils: Sobel, normalized to unit derivative gain, with
/// replicated borders.
#[inline]
fn sobel_at<T: Real>(f: &[T], h: usize, w: usize, y: usize, x: usize) -> (T, T) {
    let ym = y.saturating_sub(1);
    let yp = (y + 1).min(h - 1);
    let xm = x.saturating_sub(1);
    let xp = (x + 1).min(w - 1);
    let at = |r: usize, c: usize| f[r * w + c];
    let two = T::lit(2.0);
    let gx = (at(ym, xp) - at(ym, xm)) + two * (at(y, xp) - at(y, xm)) + (at(yp, xp) - at(yp, xm));
    let gy = (at(yp, xm) - at(ym, xm)) + two * (at(yp, x) - at(ym, x)) + (at(yp, xp) - at(ym, xp));
    let eighth = T::lit(0.125);
    (gx * eighth, gy * eighth)
}

fn sobel_planes<T: Real>(f: &[T], h: usize, w: usize) -> (Vec<T>, Vec<T>) {
    let mut gx = vec![T::zero(); h * w];
    let mut gy = vec![T::zero(); h * w];
    for y in 0..h {
        for x in 0..w {
            let (a, b) = sobel_at(f, h, w, y, x);
            gx[y * w + x] = a;
            gy[y * w + x] = b;
        }
    }
    (gx, gy)
}

/// Flow gradient: forward differences with a Neumann boundary (zero on the
/// last column/row). This is the negative adjoint of [`divergence_at`].
#[inline]
fn forward_diff_at<T: Real>(f: &[T], h: usize, w: usize, y: usize, x: usize) -> (T, T) {
    let i = y * w + x;
    let dx = if x + 1 < w {
        f[i + 1] - f[i]
    } else {
        T::zero()
    };
    let dy = if y + 1 < h {
        f[i + w] - f[i]
    } else {
        T::zero()
    };
    (dx, dy)
}

/// Backward-difference divergence with zero boundary on the first column/row.
#[inline]
fn divergence_at<T: Real>(pxx: &[T], pxy: &[T], w: usize, y: usize, x: usize) -> T {
    let i = y * w + x;
    let left = if x > 0 { pxx[i - 1] } else { T::zero() };
    let up = if y > 0 { pxy[i - w] } else { T::zero() };
    (pxx[i] - left) + (pxy[i] - up)
}

fn validate_pair<T: Real>(f1: &FeatureMap<T>, f2: &FeatureMap<T>) -> Result<()> {
    if f1.channels() != 1 || f2.channels() != 1 {
        return Err(Error::shape("TV-L1 expects single-channel inputs"));
    }
    f1.ensure_same_shape(f2, "frame pair")?;
    if f1.is_empty() {
        return Err(Error::Empty("tvl1_flow"));
    }
    f1.ensure_finite("first frame")?;
    f2.ensure_finite("second frame")?;
    Ok(())
}

/// Runs exactly `iterations` primal-dual steps from `u = 0, p = 0`.
pub fn tvl1_flow<T: Real>(
    f1: &FeatureMap<T>,
    f2: &FeatureMap<T>,
    params: &TvParams,
    iterations: usize,
) -> Result<FlowField<T>> {
    Ok(tvl1_flow_with_dual(f1, f2, params, iterations)?.0)
}

pub fn tvl1_flow_with_dual<T: Real>(
    f1: &FeatureMap<T>,
    f2: &FeatureMap<T>,
    params: &TvParams,
    iterations: usize,
) -> Result<(FlowField<T>, DualField<T>)> {
    validate_pair(f1, f2)?;
    params.validate()?;
    if iterations == 0 {
        return Err(Error::invalid("iterations must be >= 1"));
    }
    let (h, w) = (f1.height(), f1.width());
    let n = h * w;
    let tau = T::lit(params.tau);
    let theta = T::lit(params.theta);
    let lt = T::lit(params.lambda) * theta;
    let taut = tau / theta;

    let (gx, gy) = sobel_planes(f2.data(), h, w);
    let rho_c: Vec<T> = f2
        .data()
        .iter()
        .zip(f1.data())
        .map(|(&b, &a)| b - a)
        .collect();

    let mut ux = vec![T::zero(); n];
    let mut uy = vec![T::zero(); n];
    let mut vx = vec![T::zero(); n];
    let mut vy = vec![T::zero(); n];
    // p11, p12 dual to grad u_x; p21, p22 dual to grad u_y
    let mut p11 = vec![T::zero(); n];
    let mut p12 = vec![T::zero(); n];
    let mut p21 = vec![T::zero(); n];
    let mut p22 = vec![T::zero(); n];

    for _ in 0..iterations {
        for i in 0..n {
            let g2 = gx[i] * gx[i] + gy[i] * gy[i];
            let rho = rho_c[i] + gx[i] * ux[i] + gy[i] * uy[i];
            let bound = lt * g2;
            if rho < -bound {
                vx[i] = ux[i] + lt * gx[i];
                vy[i] = uy[i] + lt * gy[i];
            } else if rho > bound {
                vx[i] = ux[i] - lt * gx[i];
                vy[i] = uy[i] - lt * gy[i];
            } else {
                let s = rho / (g2 + T::DIV_EPS);
                vx[i] = ux[i] - s * gx[i];
                vy[i] = uy[i] - s * gy[i];
            }
        }
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                ux[i] = vx[i] + theta * divergence_at(&p11, &p12, w, y, x);
                uy[i] = vy[i] + theta * divergence_at(&p21, &p22, w, y, x);
            }
        }
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let (a, b) = forward_diff_at(&ux, h, w, y, x);
                let d = T::one() + taut * (a * a + b * b).sqrt();
                p11[i] = (p11[i] + taut * a) / d;
                p12[i] = (p12[i] + taut * b) / d;
                let (a, b) = forward_diff_at(&uy, h, w, y, x);
                let d = T::one() + taut * (a * a + b * b).sqrt();
                p21[i] = (p21[i] + taut * a) / d;
                p22[i] = (p22[i] + taut * b) / d;
            }
        }
    }

    let plane = |v: Vec<T>| FeatureMap::from_plane(h, w, v);
    let mut px = p11;
    px.extend(p12);
    let mut py = p21;
    py.extend(p22);
    Ok((
        FlowField::new(plane(ux)?, plane(uy)?)?,
        DualField {
            px: FeatureMap::new(2, h, w, px)?,
            py: FeatureMap::new(2, h, w, py)?,
        },
    ))
}

/// `sum |grad u| + lambda * sum |F2 + grad F2 . u - F1|`.
///
/// `|grad u|` is the per-pixel magnitude over all four derivative channels,
/// taken with the same forward differences the solver's dual step uses. The
/// data term is the linearized residual the solver thresholds.
pub fn tv_energy<T: Real>(
    u: &FlowField<T>,
    f1: &FeatureMap<T>,
    f2: &FeatureMap<T>,
    lambda: f64,
) -> Result<f64> {
    validate_pair(f1, f2)?;
    if u.ux.shape() != f1.shape() {
        return Err(Error::shape(format!(
            "flow {:?} vs frames {:?}",
            u.ux.shape(),
            f1.shape()
        )));
    }
    let (h, w) = (f1.height(), f1.width());
    let (gx, gy) = sobel_planes(f2.data(), h, w);
    let (ux, uy) = (u.ux.data(), u.uy.data());
    let mut tv = 0.0;
    let mut data = 0.0;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (a, b) = forward_diff_at(ux, h, w, y, x);
            let (c, d) = forward_diff_at(uy, h, w, y, x);
            tv += (a * a + b * b + c * c + d * d).sqrt().as_f64();
            let rho = f2.data()[i] - f1.data()[i] + gx[i] * ux[i] + gy[i] * uy[i];
            data += rho.abs().as_f64();
        }
    }
    Ok(tv + lambda * data)
}
