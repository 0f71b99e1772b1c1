//! The unrolled, differentiable flow iteration over one feature channel.
//!
//! Forward records the per-iteration primal/dual state and the data-term
//! branch taken at every pixel; backward replays the iterations in reverse,
//! recomputing the transient values (`v`, divergence, flow gradient) from the
//! recorded state.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{DualField, FlowField};
use crate::tensor::{
    correlate, correlate_adjoint_input, correlate_adjoint_kernel, pad, pad_adjoint, FeatureMap,
    Kernel2D, PadMode, PaddingSpec, Real,
};
use crate::tvl1::{TvParams, DEFAULT_LAMBDA, DEFAULT_TAU, DEFAULT_THETA};

/// Which parameter groups an optimizer step may change.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LearnFlags {
    pub sobel: bool,
    pub divergence: bool,
    pub scalars: bool,
}

impl LearnFlags {
    pub const NONE: LearnFlags = LearnFlags {
        sobel: false,
        divergence: false,
        scalars: false,
    };
    pub const ALL: LearnFlags = LearnFlags {
        sobel: true,
        divergence: true,
        scalars: true,
    };
    /// Divergence kernels plus `tau`, `lambda`, `theta`.
    pub const DIVERGENCE_AND_SCALARS: LearnFlags = LearnFlags {
        sobel: false,
        divergence: true,
        scalars: true,
    };

    pub fn any(&self) -> bool {
        self.sobel || self.divergence || self.scalars
    }
}

/// Learnable parameters of the flow iteration, shared across iterations.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowParams<T> {
    pub tau: T,
    pub lambda: T,
    pub theta: T,
    /// 1x2 divergence kernel along x
    pub w_x: Kernel2D<T>,
    /// 2x1 divergence kernel along y
    pub w_y: Kernel2D<T>,
    /// 3x3 image-gradient kernels applied to the second frame
    pub sobel_x: Kernel2D<T>,
    pub sobel_y: Kernel2D<T>,
    pub learn: LearnFlags,
}

pub const SOBEL_X_INIT: [f64; 9] = [-0.125, 0.0, 0.125, -0.25, 0.0, 0.25, -0.125, 0.0, 0.125];
pub const SOBEL_Y_INIT: [f64; 9] = [-0.125, -0.25, -0.125, 0.0, 0.0, 0.0, 0.125, 0.25, 0.125];
pub const DIV_X_INIT: [f64; 2] = [-1.0, 1.0];
pub const DIV_Y_INIT: [f64; 2] = [-1.0, 1.0];

impl<T: Real> Default for FlowParams<T> {
    fn default() -> Self {
        Self::from_tv(&TvParams {
            tau: DEFAULT_TAU,
            lambda: DEFAULT_LAMBDA,
            theta: DEFAULT_THETA,
        })
    }
}

impl<T: Real> FlowParams<T> {
    /// Standard kernels with the given scalars and nothing learnable.
    pub fn from_tv(tv: &TvParams) -> Self {
        FlowParams {
            tau: T::lit(tv.tau),
            lambda: T::lit(tv.lambda),
            theta: T::lit(tv.theta),
            w_x: Kernel2D::from_f64(1, 2, &DIV_X_INIT).expect("static kernel"),
            w_y: Kernel2D::from_f64(2, 1, &DIV_Y_INIT).expect("static kernel"),
            sobel_x: Kernel2D::from_f64(3, 3, &SOBEL_X_INIT).expect("static kernel"),
            sobel_y: Kernel2D::from_f64(3, 3, &SOBEL_Y_INIT).expect("static kernel"),
            learn: LearnFlags::NONE,
        }
    }

    pub fn with_learn(mut self, learn: LearnFlags) -> Self {
        self.learn = learn;
        self
    }

    pub fn tv(&self) -> TvParams {
        TvParams {
            tau: self.tau.as_f64(),
            lambda: self.lambda.as_f64(),
            theta: self.theta.as_f64(),
        }
    }

    pub fn cast<U: Real>(&self) -> FlowParams<U> {
        FlowParams {
            tau: U::lit(self.tau.as_f64()),
            lambda: U::lit(self.lambda.as_f64()),
            theta: U::lit(self.theta.as_f64()),
            w_x: self.w_x.cast(),
            w_y: self.w_y.cast(),
            sobel_x: self.sobel_x.cast(),
            sobel_y: self.sobel_y.cast(),
            learn: self.learn,
        }
    }

    /// `theta` must be positive (it divides); `tau` and `lambda` only need to
    /// be non-negative for the iteration to be defined.
    pub fn validate(&self) -> Result<()> {
        let scalars = [
            ("tau", self.tau),
            ("lambda", self.lambda),
            ("theta", self.theta),
        ];
        for (name, v) in scalars {
            if !v.is_finite() || v < T::zero() {
                return Err(Error::invalid(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if self.theta <= T::zero() {
            return Err(Error::invalid("theta must be > 0"));
        }
        let shapes = [
            ("w_x", &self.w_x, (1, 2)),
            ("w_y", &self.w_y, (2, 1)),
            ("sobel_x", &self.sobel_x, (3, 3)),
            ("sobel_y", &self.sobel_y, (3, 3)),
        ];
        for (name, k, (r, c)) in shapes {
            if (k.rows(), k.cols()) != (r, c) {
                return Err(Error::shape(format!(
                    "{name} must be {r}x{c}, got {}x{}",
                    k.rows(),
                    k.cols()
                )));
            }
        }
        Ok(())
    }
}

/// Gradients for every leaf of [`FlowParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct FlowParamGrads<T> {
    pub d_tau: T,
    pub d_lambda: T,
    pub d_theta: T,
    pub d_wx: Kernel2D<T>,
    pub d_wy: Kernel2D<T>,
    pub d_sobel_x: Kernel2D<T>,
    pub d_sobel_y: Kernel2D<T>,
}

impl<T: Real> FlowParamGrads<T> {
    pub fn zeros() -> Self {
        FlowParamGrads {
            d_tau: T::zero(),
            d_lambda: T::zero(),
            d_theta: T::zero(),
            d_wx: Kernel2D::zeros(1, 2),
            d_wy: Kernel2D::zeros(2, 1),
            d_sobel_x: Kernel2D::zeros(3, 3),
            d_sobel_y: Kernel2D::zeros(3, 3),
        }
    }

    pub fn accumulate(&mut self, other: &FlowParamGrads<T>) {
        self.d_tau += other.d_tau;
        self.d_lambda += other.d_lambda;
        self.d_theta += other.d_theta;
        let pairs = [
            (&mut self.d_wx, &other.d_wx),
            (&mut self.d_wy, &other.d_wy),
            (&mut self.d_sobel_x, &other.d_sobel_x),
            (&mut self.d_sobel_y, &other.d_sobel_y),
        ];
        for (a, b) in pairs {
            for (x, y) in a.weights_mut().iter_mut().zip(b.weights()) {
                *x += *y;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        self.d_tau *= s;
        self.d_lambda *= s;
        self.d_theta *= s;
        for k in [
            &mut self.d_wx,
            &mut self.d_wy,
            &mut self.d_sobel_x,
            &mut self.d_sobel_y,
        ] {
            for w in k.weights_mut() {
                *w *= s;
            }
        }
    }

    /// `(leaf name, values)` in a fixed order.
    pub fn leaves(&self) -> Vec<(&'static str, Vec<T>)> {
        vec![
            ("d_tau", vec![self.d_tau]),
            ("d_lambda", vec![self.d_lambda]),
            ("d_theta", vec![self.d_theta]),
            ("d_wx", self.d_wx.weights().to_vec()),
            ("d_wy", self.d_wy.weights().to_vec()),
            ("d_sobel_x", self.d_sobel_x.weights().to_vec()),
            ("d_sobel_y", self.d_sobel_y.weights().to_vec()),
        ]
    }
}

/// Output of [`rep_flow_backward`].
#[derive(Clone, Debug, PartialEq)]
pub struct FlowGrads<T> {
    pub params: FlowParamGrads<T>,
    pub d_f1: FeatureMap<T>,
    pub d_f2: FeatureMap<T>,
}

/// Data-term case chosen at a pixel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Branch {
    /// `rho < -lambda*theta*|grad F2|^2`
    Below = 0,
    /// `rho > lambda*theta*|grad F2|^2`
    Above = 1,
    /// exact projection onto `rho = 0`
    Inside = 2,
}

/// Recorded state of one iteration: its inputs and the branch mask.
#[derive(Clone, Debug)]
pub struct IterationRecord<T> {
    pub ux: Vec<T>,
    pub uy: Vec<T>,
    /// `[p11, p12, p21, p22]`: duals of (d/dx, d/dy) of `u_x`, then `u_y`
    pub p: [Vec<T>; 4],
    pub branch: Vec<Branch>,
}

/// Everything [`rep_flow_backward`] needs from a forward call.
#[derive(Clone, Debug)]
pub struct FlowTape<T> {
    height: usize,
    width: usize,
    params: FlowParams<T>,
    f2: Vec<T>,
    rho_c: Vec<T>,
    gx: Vec<T>,
    gy: Vec<T>,
    records: Vec<IterationRecord<T>>,
    dual: DualField<T>,
}

impl<T: Real> FlowTape<T> {
    pub fn iterations(&self) -> usize {
        self.records.len()
    }

    pub fn records(&self) -> &[IterationRecord<T>] {
        &self.records
    }

    /// Dual state after the last iteration.
    pub fn final_dual(&self) -> &DualField<T> {
        &self.dual
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

const SOBEL_PAD: PaddingSpec = PaddingSpec {
    mode: PadMode::Replicate,
    left: 1,
    right: 1,
    top: 1,
    bottom: 1,
};
const DIV_X_PAD: PaddingSpec = PaddingSpec {
    mode: PadMode::Zero,
    left: 1,
    right: 0,
    top: 0,
    bottom: 0,
};
const DIV_Y_PAD: PaddingSpec = PaddingSpec {
    mode: PadMode::Zero,
    left: 0,
    right: 0,
    top: 1,
    bottom: 0,
};

/// Single-channel plane geometry plus the fixed operators the iteration uses.
struct Grid {
    h: usize,
    w: usize,
}

impl Grid {
    fn conv<T: Real>(&self, src: &[T], k: &Kernel2D<T>, spec: &PaddingSpec) -> Vec<T> {
        let (ph, pw) = spec.padded_dims(self.h, self.w);
        correlate(&pad(src, self.h, self.w, spec), ph, pw, k)
    }

    /// Adjoint of [`Grid::conv`]: returns the source gradient and adds the
    /// kernel gradient into `gk`.
    fn conv_backward<T: Real>(
        &self,
        src: &[T],
        k: &Kernel2D<T>,
        spec: &PaddingSpec,
        grad_out: &[T],
        gk: &mut Kernel2D<T>,
    ) -> Vec<T> {
        let (ph, pw) = spec.padded_dims(self.h, self.w);
        let padded = pad(src, self.h, self.w, spec);
        let dk = correlate_adjoint_kernel(&padded, ph, pw, grad_out, k.rows(), k.cols());
        for (a, b) in gk.weights_mut().iter_mut().zip(&dk) {
            *a += *b;
        }
        pad_adjoint(
            &correlate_adjoint_input(grad_out, ph, pw, k),
            self.h,
            self.w,
            spec,
        )
    }

    fn divergence<T: Real>(&self, px: &[T], py: &[T], params: &FlowParams<T>) -> Vec<T> {
        let mut d = self.conv(px, &params.w_x, &DIV_X_PAD);
        for (a, b) in d.iter_mut().zip(self.conv(py, &params.w_y, &DIV_Y_PAD)) {
            *a += b;
        }
        d
    }

    /// Forward differences, zero on the last column/row.
    fn grad<T: Real>(&self, u: &[T]) -> (Vec<T>, Vec<T>) {
        let (h, w) = (self.h, self.w);
        let mut dx = vec![T::zero(); h * w];
        let mut dy = vec![T::zero(); h * w];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if x + 1 < w {
                    dx[i] = u[i + 1] - u[i];
                }
                if y + 1 < h {
                    dy[i] = u[i + w] - u[i];
                }
            }
        }
        (dx, dy)
    }

    /// Adds the adjoint of [`Grid::grad`] applied to `(gdx, gdy)` into `out`.
    fn grad_adjoint_into<T: Real>(&self, gdx: &[T], gdy: &[T], out: &mut [T]) {
        let (h, w) = (self.h, self.w);
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if x + 1 < w {
                    out[i + 1] += gdx[i];
                    out[i] -= gdx[i];
                }
                if y + 1 < h {
                    out[i + w] += gdy[i];
                    out[i] -= gdy[i];
                }
            }
        }
    }
}

fn validate_inputs<T: Real>(
    f1: &FeatureMap<T>,
    f2: &FeatureMap<T>,
    params: &FlowParams<T>,
    iterations: usize,
) -> Result<()> {
    if f1.channels() != 1 || f2.channels() != 1 {
        return Err(Error::shape("flow layer expects single-channel frames"));
    }
    f1.ensure_same_shape(f2, "frame pair")?;
    if f1.is_empty() {
        return Err(Error::Empty("rep_flow_forward"));
    }
    f1.ensure_finite("first frame")?;
    f2.ensure_finite("second frame")?;
    params.validate()?;
    if iterations == 0 {
        return Err(Error::invalid("iterations must be >= 1"));
    }
    Ok(())
}

/// Transient values of one iteration, recomputed in backward.
struct Step<T> {
    div1: Vec<T>,
    div2: Vec<T>,
    ux: Vec<T>,
    uy: Vec<T>,
    /// forward differences of the new `u_x` and `u_y`
    a: [Vec<T>; 4],
    n1: Vec<T>,
    n2: Vec<T>,
    p: [Vec<T>; 4],
}

#[allow(clippy::too_many_arguments)]
fn step<T: Real>(
    grid: &Grid,
    params: &FlowParams<T>,
    rho_c: &[T],
    gx: &[T],
    gy: &[T],
    ux: &[T],
    uy: &[T],
    p: &[Vec<T>; 4],
    branch: &mut [Branch],
) -> Step<T> {
    let n = grid.h * grid.w;
    let lt = params.lambda * params.theta;
    let taut = params.tau / params.theta;
    let mut vx = vec![T::zero(); n];
    let mut vy = vec![T::zero(); n];
    for i in 0..n {
        let g2 = gx[i] * gx[i] + gy[i] * gy[i];
        let rho = rho_c[i] + gx[i] * ux[i] + gy[i] * uy[i];
        let bound = lt * g2;
        if rho < -bound {
            branch[i] = Branch::Below;
            vx[i] = ux[i] + lt * gx[i];
            vy[i] = uy[i] + lt * gy[i];
        } else if rho > bound {
            branch[i] = Branch::Above;
            vx[i] = ux[i] - lt * gx[i];
            vy[i] = uy[i] - lt * gy[i];
        } else {
            branch[i] = Branch::Inside;
            let s = rho / (g2 + T::DIV_EPS);
            vx[i] = ux[i] - s * gx[i];
            vy[i] = uy[i] - s * gy[i];
        }
    }
    let div1 = grid.divergence(&p[0], &p[1], params);
    let div2 = grid.divergence(&p[2], &p[3], params);
    let nux: Vec<T> = vx
        .iter()
        .zip(&div1)
        .map(|(&v, &d)| v + params.theta * d)
        .collect();
    let nuy: Vec<T> = vy
        .iter()
        .zip(&div2)
        .map(|(&v, &d)| v + params.theta * d)
        .collect();
    let (a11, a12) = grid.grad(&nux);
    let (a21, a22) = grid.grad(&nuy);
    let mut n1 = vec![T::zero(); n];
    let mut n2 = vec![T::zero(); n];
    let mut np: [Vec<T>; 4] = std::array::from_fn(|_| vec![T::zero(); n]);
    for i in 0..n {
        n1[i] = (a11[i] * a11[i] + a12[i] * a12[i]).sqrt();
        n2[i] = (a21[i] * a21[i] + a22[i] * a22[i]).sqrt();
        let d1 = T::one() + taut * n1[i];
        let d2 = T::one() + taut * n2[i];
        np[0][i] = (p[0][i] + taut * a11[i]) / d1;
        np[1][i] = (p[1][i] + taut * a12[i]) / d1;
        np[2][i] = (p[2][i] + taut * a21[i]) / d2;
        np[3][i] = (p[3][i] + taut * a22[i]) / d2;
    }
    Step {
        div1,
        div2,
        ux: nux,
        uy: nuy,
        a: [a11, a12, a21, a22],
        n1,
        n2,
        p: np,
    }
}

fn image_gradients<T: Real>(grid: &Grid, f2: &[T], params: &FlowParams<T>) -> (Vec<T>, Vec<T>) {
    (
        grid.conv(f2, &params.sobel_x, &SOBEL_PAD),
        grid.conv(f2, &params.sobel_y, &SOBEL_PAD),
    )
}

/// Computes the flow from `f1` to `f2` by unrolling `iterations` steps from
/// `u = 0, p = 0`, and records what the backward pass needs.
pub fn rep_flow_forward<T: Real>(
    f1: &FeatureMap<T>,
    f2: &FeatureMap<T>,
    params: &FlowParams<T>,
    iterations: usize,
) -> Result<(FlowField<T>, FlowTape<T>)> {
    validate_inputs(f1, f2, params, iterations)?;
    let grid = Grid {
        h: f1.height(),
        w: f1.width(),
    };
    let n = grid.h * grid.w;
    let (gx, gy) = image_gradients(&grid, f2.data(), params);
    let rho_c: Vec<T> = f2
        .data()
        .iter()
        .zip(f1.data())
        .map(|(&b, &a)| b - a)
        .collect();

    let mut ux = vec![T::zero(); n];
    let mut uy = vec![T::zero(); n];
    let mut p: [Vec<T>; 4] = std::array::from_fn(|_| vec![T::zero(); n]);
    let mut records = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let mut branch = vec![Branch::Inside; n];
        let s = step(&grid, params, &rho_c, &gx, &gy, &ux, &uy, &p, &mut branch);
        let prev_p = std::mem::replace(&mut p, s.p);
        records.push(IterationRecord {
            ux: std::mem::replace(&mut ux, s.ux),
            uy: std::mem::replace(&mut uy, s.uy),
            p: prev_p,
            branch,
        });
    }
    let (h, w) = (grid.h, grid.w);
    let [p11, p12, p21, p22] = p;
    let dual = DualField {
        px: FeatureMap::new(2, h, w, [p11, p12].concat())?,
        py: FeatureMap::new(2, h, w, [p21, p22].concat())?,
    };
    let flow = FlowField::new(
        FeatureMap::from_plane(h, w, ux)?,
        FeatureMap::from_plane(h, w, uy)?,
    )?;
    let tape = FlowTape {
        height: h,
        width: w,
        params: params.clone(),
        f2: f2.data().to_vec(),
        rho_c,
        gx,
        gy,
        records,
        dual,
    };
    Ok((flow, tape))
}

/// Reverse-mode gradients of the unrolled iteration for an upstream gradient
/// on the returned flow. The data-term case split is differentiated with the
/// branch recorded in forward.
pub fn rep_flow_backward<T: Real>(
    tape: &FlowTape<T>,
    upstream: &FlowField<T>,
) -> Result<FlowGrads<T>> {
    let (h, w) = (tape.height, tape.width);
    if upstream.height() != h || upstream.width() != w {
        return Err(Error::shape(format!(
            "upstream gradient is {}x{}, tape is {h}x{w}",
            upstream.height(),
            upstream.width()
        )));
    }
    let grid = Grid { h, w };
    let n = h * w;
    let params = &tape.params;
    let (tau, lambda, theta) = (params.tau, params.lambda, params.theta);
    let lt = lambda * theta;
    let taut = tau / theta;
    let (gx, gy) = (&tape.gx, &tape.gy);

    let mut grads = FlowParamGrads::zeros();
    let mut g_ux = upstream.ux.data().to_vec();
    let mut g_uy = upstream.uy.data().to_vec();
    let mut g_p: [Vec<T>; 4] = std::array::from_fn(|_| vec![T::zero(); n]);
    let mut g_gx = vec![T::zero(); n];
    let mut g_gy = vec![T::zero(); n];
    let mut g_g2 = vec![T::zero(); n];
    let mut g_rho_c = vec![T::zero(); n];
    let mut g_lt = T::zero();
    let mut g_taut = T::zero();
    let mut g_theta = T::zero();

    let mut branch_scratch = vec![Branch::Inside; n];
    for rec in tape.records.iter().rev() {
        let s = step(
            &grid,
            params,
            &tape.rho_c,
            gx,
            gy,
            &rec.ux,
            &rec.uy,
            &rec.p,
            &mut branch_scratch,
        );
        debug_assert!(branch_scratch == rec.branch);

        // dual update
        let mut g_a: [Vec<T>; 4] = std::array::from_fn(|_| vec![T::zero(); n]);
        let mut g_p_in: [Vec<T>; 4] = std::array::from_fn(|_| vec![T::zero(); n]);
        for (comp, norm) in [(0usize, &s.n1), (2usize, &s.n2)] {
            for i in 0..n {
                let q1 = g_p[comp][i];
                let q2 = g_p[comp + 1][i];
                let d = T::one() + taut * norm[i];
                let a1 = s.a[comp][i];
                let a2 = s.a[comp + 1][i];
                g_p_in[comp][i] = q1 / d;
                g_p_in[comp + 1][i] = q2 / d;
                let mut ga1 = taut * q1 / d;
                let mut ga2 = taut * q2 / d;
                let g_d = -(q1 * s.p[comp][i] + q2 * s.p[comp + 1][i]) / d;
                g_taut += g_d * norm[i] + (q1 * a1 + q2 * a2) / d;
                if norm[i] > T::zero() {
                    let g_n = g_d * taut;
                    ga1 += g_n * a1 / norm[i];
                    ga2 += g_n * a2 / norm[i];
                }
                g_a[comp][i] = ga1;
                g_a[comp + 1][i] = ga2;
            }
        }
        grid.grad_adjoint_into(&g_a[0], &g_a[1], &mut g_ux);
        grid.grad_adjoint_into(&g_a[2], &g_a[3], &mut g_uy);

        // u = v + theta * div(p)
        for i in 0..n {
            g_theta += g_ux[i] * s.div1[i] + g_uy[i] * s.div2[i];
        }
        let g_div1: Vec<T> = g_ux.iter().map(|&g| g * theta).collect();
        let g_div2: Vec<T> = g_uy.iter().map(|&g| g * theta).collect();
        let add = |dst: &mut Vec<T>, src: Vec<T>| {
            for (a, b) in dst.iter_mut().zip(src) {
                *a += b;
            }
        };
        add(
            &mut g_p_in[0],
            grid.conv_backward(&rec.p[0], &params.w_x, &DIV_X_PAD, &g_div1, &mut grads.d_wx),
        );
        add(
            &mut g_p_in[1],
            grid.conv_backward(&rec.p[1], &params.w_y, &DIV_Y_PAD, &g_div1, &mut grads.d_wy),
        );
        add(
            &mut g_p_in[2],
            grid.conv_backward(&rec.p[2], &params.w_x, &DIV_X_PAD, &g_div2, &mut grads.d_wx),
        );
        add(
            &mut g_p_in[3],
            grid.conv_backward(&rec.p[3], &params.w_y, &DIV_Y_PAD, &g_div2, &mut grads.d_wy),
        );

        // data-term step; g_ux/g_uy currently hold the adjoint of v
        let mut g_ux_in = vec![T::zero(); n];
        let mut g_uy_in = vec![T::zero(); n];
        for i in 0..n {
            let (gvx, gvy) = (g_ux[i], g_uy[i]);
            let mut g_rho = T::zero();
            match rec.branch[i] {
                Branch::Below => {
                    g_lt += gvx * gx[i] + gvy * gy[i];
                    g_gx[i] += gvx * lt;
                    g_gy[i] += gvy * lt;
                }
                Branch::Above => {
                    g_lt -= gvx * gx[i] + gvy * gy[i];
                    g_gx[i] -= gvx * lt;
                    g_gy[i] -= gvy * lt;
                }
                Branch::Inside => {
                    let denom = gx[i] * gx[i] + gy[i] * gy[i] + T::DIV_EPS;
                    let rho = tape.rho_c[i] + gx[i] * rec.ux[i] + gy[i] * rec.uy[i];
                    let sc = rho / denom;
                    let g_s = -(gvx * gx[i] + gvy * gy[i]);
                    g_gx[i] -= gvx * sc;
                    g_gy[i] -= gvy * sc;
                    g_rho = g_s / denom;
                    g_g2[i] -= g_s * sc / denom;
                }
            }
            g_rho_c[i] += g_rho;
            g_gx[i] += g_rho * rec.ux[i];
            g_gy[i] += g_rho * rec.uy[i];
            g_ux_in[i] = gvx + g_rho * gx[i];
            g_uy_in[i] = gvy + g_rho * gy[i];
        }
        g_ux = g_ux_in;
        g_uy = g_uy_in;
        g_p = g_p_in;
    }

    // scalars
    g_theta += g_lt * lambda - g_taut * tau / (theta * theta);
    grads.d_lambda = g_lt * theta;
    grads.d_tau = g_taut / theta;
    grads.d_theta = g_theta;

    // g2 = gx^2 + gy^2, then the Sobel convolutions of F2
    for i in 0..n {
        g_gx[i] += T::lit(2.0) * gx[i] * g_g2[i];
        g_gy[i] += T::lit(2.0) * gy[i] * g_g2[i];
    }
    let mut d_f2 = grid.conv_backward(
        &tape.f2,
        &params.sobel_x,
        &SOBEL_PAD,
        &g_gx,
        &mut grads.d_sobel_x,
    );
    let from_gy = grid.conv_backward(
        &tape.f2,
        &params.sobel_y,
        &SOBEL_PAD,
        &g_gy,
        &mut grads.d_sobel_y,
    );
    let mut d_f1 = vec![T::zero(); n];
    for i in 0..n {
        d_f2[i] += from_gy[i] + g_rho_c[i];
        d_f1[i] = -g_rho_c[i];
    }
    Ok(FlowGrads {
        params: grads,
        d_f1: FeatureMap::from_plane(h, w, d_f1)?,
        d_f2: FeatureMap::from_plane(h, w, d_f2)?,
    })
}
