//! SGD with momentum. Flow parameters use a scaled-down learning rate, and the
//! positive scalars `tau`, `lambda`, `theta` are stepped in log space so they
//! stay positive.

use super::flow::{FlowParamGrads, FlowParams};
use super::wrapper::{GradientBundle, LayerWeights};
use crate::error::{Error, Result};
use crate::tensor::{ConvLayer, ConvLayerGrads, Kernel2D, Real};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    /// multiplier applied to `lr` for every flow parameter
    pub flow_lr_scale: f64,
}

impl Default for Sgd {
    fn default() -> Self {
        Sgd {
            lr: 0.01,
            momentum: 0.9,
            flow_lr_scale: 0.01,
        }
    }
}

impl Sgd {
    pub fn flow_lr(&self) -> f64 {
        self.lr * self.flow_lr_scale
    }
}

/// Velocity buffers mirroring [`FlowParams`]; the scalar buffers live in log
/// space.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowMomentum<T> {
    pub log_tau: T,
    pub log_lambda: T,
    pub log_theta: T,
    pub w_x: Vec<T>,
    pub w_y: Vec<T>,
    pub sobel_x: Vec<T>,
    pub sobel_y: Vec<T>,
}

impl<T: Real> FlowMomentum<T> {
    pub fn zeros() -> Self {
        FlowMomentum {
            log_tau: T::zero(),
            log_lambda: T::zero(),
            log_theta: T::zero(),
            w_x: vec![T::zero(); 2],
            w_y: vec![T::zero(); 2],
            sobel_x: vec![T::zero(); 9],
            sobel_y: vec![T::zero(); 9],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvMomentum<T> {
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> ConvMomentum<T> {
    pub fn zeros_like(layer: &ConvLayer<T>) -> Self {
        ConvMomentum {
            weights: vec![T::zero(); layer.weights.len()],
            bias: vec![T::zero(); layer.bias.len()],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerMomentum<T> {
    pub reduce: ConvMomentum<T>,
    pub expand: ConvMomentum<T>,
    pub flow: FlowMomentum<T>,
}

impl<T: Real> LayerMomentum<T> {
    pub fn zeros_like(weights: &LayerWeights<T>) -> Self {
        LayerMomentum {
            reduce: ConvMomentum::zeros_like(&weights.reduce),
            expand: ConvMomentum::zeros_like(&weights.expand),
            flow: FlowMomentum::zeros(),
        }
    }
}

fn ensure_finite<T: Real>(leaf: &str, g: &[T]) -> Result<()> {
    if g.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteGradient(leaf.to_string()))
    }
}

#[inline]
fn momentum_step<T: Real>(w: &mut [T], g: &[T], buf: &mut [T], lr: T, mu: T) {
    for ((w, g), b) in w.iter_mut().zip(g).zip(buf.iter_mut()) {
        *b = mu * *b + *g;
        *w -= lr * *b;
    }
}

#[inline]
fn log_step<T: Real>(value: &mut T, grad: T, buf: &mut T, lr: T, mu: T) {
    // d/d(log v) = v * d/dv; a zero step leaves the value bit-identical
    *buf = mu * *buf + grad * *value;
    *value *= (-(lr * *buf)).exp();
}

/// Updates the learnable groups of `params` in place. Groups whose learn flag
/// is off, and their velocity buffers, are left untouched.
pub fn step_flow_params<T: Real>(
    params: &mut FlowParams<T>,
    grads: &FlowParamGrads<T>,
    sgd: &Sgd,
    state: &mut FlowMomentum<T>,
) -> Result<()> {
    let learn = params.learn;
    if learn.scalars {
        ensure_finite("d_tau", &[grads.d_tau])?;
        ensure_finite("d_lambda", &[grads.d_lambda])?;
        ensure_finite("d_theta", &[grads.d_theta])?;
    }
    if learn.divergence {
        ensure_finite("d_wx", grads.d_wx.weights())?;
        ensure_finite("d_wy", grads.d_wy.weights())?;
    }
    if learn.sobel {
        ensure_finite("d_sobel_x", grads.d_sobel_x.weights())?;
        ensure_finite("d_sobel_y", grads.d_sobel_y.weights())?;
    }
    let lr = T::lit(sgd.flow_lr());
    let mu = T::lit(sgd.momentum);
    if learn.scalars {
        log_step(&mut params.tau, grads.d_tau, &mut state.log_tau, lr, mu);
        log_step(
            &mut params.lambda,
            grads.d_lambda,
            &mut state.log_lambda,
            lr,
            mu,
        );
        log_step(
            &mut params.theta,
            grads.d_theta,
            &mut state.log_theta,
            lr,
            mu,
        );
    }
    let kernel = |k: &mut Kernel2D<T>, g: &Kernel2D<T>, buf: &mut Vec<T>| {
        momentum_step(k.weights_mut(), g.weights(), buf, lr, mu);
    };
    if learn.divergence {
        kernel(&mut params.w_x, &grads.d_wx, &mut state.w_x);
        kernel(&mut params.w_y, &grads.d_wy, &mut state.w_y);
    }
    if learn.sobel {
        kernel(&mut params.sobel_x, &grads.d_sobel_x, &mut state.sobel_x);
        kernel(&mut params.sobel_y, &grads.d_sobel_y, &mut state.sobel_y);
    }
    Ok(())
}

pub fn step_conv<T: Real>(
    layer: &mut ConvLayer<T>,
    grads: &ConvLayerGrads<T>,
    lr: f64,
    momentum: f64,
    state: &mut ConvMomentum<T>,
    update_bias: bool,
    leaf: &str,
) -> Result<()> {
    ensure_finite(leaf, &grads.weights)?;
    if update_bias {
        ensure_finite(leaf, &grads.bias)?;
    }
    let (lr, mu) = (T::lit(lr), T::lit(momentum));
    momentum_step(
        &mut layer.weights,
        &grads.weights,
        &mut state.weights,
        lr,
        mu,
    );
    if update_bias {
        momentum_step(&mut layer.bias, &grads.bias, &mut state.bias, lr, mu);
    }
    Ok(())
}

/// Steps reduce/expand at `lr` and the flow parameters at `lr * flow_lr_scale`.
pub fn step_layer<T: Real>(
    weights: &mut LayerWeights<T>,
    grads: &GradientBundle<T>,
    sgd: &Sgd,
    state: &mut LayerMomentum<T>,
) -> Result<()> {
    ensure_finite("d_reduce", &grads.d_reduce)?;
    ensure_finite("d_expand", &grads.d_expand.weights)?;
    ensure_finite("d_expand_bias", &grads.d_expand.bias)?;
    step_flow_params(&mut weights.flow, &grads.flow, sgd, &mut state.flow)?;
    let reduce_grads = ConvLayerGrads {
        weights: grads.d_reduce.clone(),
        bias: vec![T::zero(); weights.reduce.bias.len()],
    };
    step_conv(
        &mut weights.reduce,
        &reduce_grads,
        sgd.lr,
        sgd.momentum,
        &mut state.reduce,
        false,
        "d_reduce",
    )?;
    step_conv(
        &mut weights.expand,
        &grads.d_expand,
        sgd.lr,
        sgd.momentum,
        &mut state.expand,
        true,
        "d_expand",
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layer::LearnFlags;

    fn grads_filled(v: f64) -> FlowParamGrads<f64> {
        let mut g = FlowParamGrads::zeros();
        g.d_tau = v;
        g.d_lambda = v;
        g.d_theta = v;
        for k in [&mut g.d_wx, &mut g.d_wy, &mut g.d_sobel_x, &mut g.d_sobel_y] {
            k.weights_mut().fill(v);
        }
        g
    }

    #[test]
    fn zero_gradient_keeps_params_and_decays_momentum() {
        let mut p = FlowParams::<f64>::default().with_learn(LearnFlags::ALL);
        let before = p.clone();
        let mut st = FlowMomentum::zeros();
        step_flow_params(&mut p, &FlowParamGrads::zeros(), &Sgd::default(), &mut st).unwrap();
        assert_eq!(p, before);

        let mut st = FlowMomentum::zeros();
        st.log_theta = 2.0;
        st.w_x = vec![1.0, -1.0];
        step_flow_params(&mut p, &FlowParamGrads::zeros(), &Sgd::default(), &mut st).unwrap();
        assert_eq!(st.log_theta, 0.9 * 2.0);
        assert_eq!(st.w_x, vec![0.9, -0.9]);
    }

    #[test]
    fn learn_flags_off_leaves_everything() {
        let mut p = FlowParams::<f64>::default();
        let before = p.clone();
        let mut st = FlowMomentum::zeros();
        step_flow_params(
            &mut p,
            &grads_filled(3.0),
            &Sgd {
                lr: 1.0,
                ..Sgd::default()
            },
            &mut st,
        )
        .unwrap();
        assert_eq!(p, before);
        assert_eq!(st, FlowMomentum::zeros());
    }

    #[test]
    fn theta_steps_in_log_space() {
        let mut p = FlowParams::<f64>::default().with_learn(LearnFlags {
            scalars: true,
            ..LearnFlags::NONE
        });
        let theta0 = p.theta;
        let mut g = FlowParamGrads::zeros();
        g.d_theta = 2.5;
        let sgd = Sgd {
            lr: 0.4,
            ..Sgd::default()
        };
        step_flow_params(&mut p, &g, &sgd, &mut FlowMomentum::zeros()).unwrap();
        let expected = theta0.ln() - 0.01 * 0.4 * 2.5 * theta0;
        assert!((p.theta.ln() - expected).abs() < 1e-15);
        assert_eq!(p.tau, FlowParams::<f64>::default().tau);
    }

    #[test]
    fn scalars_stay_positive_under_huge_steps() {
        let mut p = FlowParams::<f64>::default().with_learn(LearnFlags::ALL);
        let mut st = FlowMomentum::zeros();
        let sgd = Sgd {
            lr: 100.0,
            ..Sgd::default()
        };
        for _ in 0..20 {
            step_flow_params(&mut p, &grads_filled(50.0), &sgd, &mut st).unwrap();
            assert!(p.tau > 0.0 && p.lambda > 0.0 && p.theta > 0.0);
        }
    }

    #[test]
    fn non_finite_gradient_names_the_leaf() {
        let mut p = FlowParams::<f64>::default().with_learn(LearnFlags::ALL);
        let mut g = FlowParamGrads::zeros();
        g.d_wy.weights_mut()[1] = f64::NAN;
        let err =
            step_flow_params(&mut p, &g, &Sgd::default(), &mut FlowMomentum::zeros()).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref leaf) if leaf == "d_wy"));
    }
}
