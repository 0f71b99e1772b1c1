//! Central-difference verification of every reverse-mode gradient.
//!
//! Each check builds a randomized fixture from a seed, contracts the output
//! with random weights into a scalar loss, and compares the analytic gradient
//! of every entry of a leaf with `(L(x + h) - L(x - h)) / 2h`. A leaf's error
//! is `max|ad - fd| / max(max|ad|, max|fd|)`, defined as 0 when the two agree
//! exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::field::FlowField;
use crate::layer::{
    flow_conv_flow, flow_conv_flow_backward, flow_conv_flow_taped, layer_backward, layer_forward,
    layer_forward_taped, rep_flow_backward, rep_flow_forward, FlowParams, LayerWeights, LearnFlags,
};
use crate::synth::{shift_circular, texture};
use crate::tensor::{ConvLayer, FeatureMap, PaddingSpec};

pub const DEFAULT_STEP: f64 = 1e-6;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Which leaves to verify.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LeafGroups {
    /// flow-parameter groups (`d_tau`, `d_wx`, `d_sobel_x`, ...)
    pub flow: LearnFlags,
    /// `d_f1`, `d_f2` of the single-channel iteration
    pub inputs: bool,
    /// `d_reduce`, `d_expand`, `d_expand_bias` of the channel wrapper
    pub layer: bool,
    /// `d_mid` of the flow-conv-flow composition
    pub fcf: bool,
}

impl LeafGroups {
    pub const ALL: LeafGroups = LeafGroups {
        flow: LearnFlags::ALL,
        inputs: true,
        layer: true,
        fcf: true,
    };
    pub const NONE: LeafGroups = LeafGroups {
        flow: LearnFlags::NONE,
        inputs: false,
        layer: false,
        fcf: false,
    };
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub iterations: usize,
    /// spatial side of the square fixtures
    pub size: usize,
    pub step: f64,
    pub tolerance: f64,
    pub groups: LeafGroups,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            seed: 0,
            iterations: 5,
            size: 16,
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
            groups: LeafGroups::ALL,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LeafReport {
    pub name: String,
    pub entries: usize,
    pub max_abs_err: f64,
    pub rel_err: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub iterations: usize,
    pub tolerance: f64,
    pub leaves: Vec<LeafReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.leaves.iter().all(|l| l.passed)
    }

    pub fn failing(&self) -> Vec<&str> {
        self.leaves
            .iter()
            .filter(|l| !l.passed)
            .map(|l| l.name.as_str())
            .collect()
    }

    pub fn worst(&self) -> f64 {
        self.leaves.iter().map(|l| l.rel_err).fold(0.0, f64::max)
    }
}

/// Relative error between an analytic and a numeric gradient vector.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> (f64, f64) {
    let max_abs = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    if diff == 0.0 {
        return (0.0, 0.0);
    }
    let scale = max_abs(analytic)
        .max(max_abs(numeric))
        .max(f64::MIN_POSITIVE);
    (diff, diff / scale)
}

/// Central differences of `loss` around the current point; `loss(i, d)`
/// evaluates with entry `i` offset by `d`.
pub fn central_differences(
    entries: usize,
    step: f64,
    mut loss: impl FnMut(usize, f64) -> Result<f64>,
) -> Result<Vec<f64>> {
    (0..entries)
        .map(|i| Ok((loss(i, step)? - loss(i, -step)?) / (2.0 * step)))
        .collect()
}

fn leaf(
    name: &str,
    analytic: &[f64],
    step: f64,
    tolerance: f64,
    loss: impl FnMut(usize, f64) -> Result<f64>,
) -> Result<LeafReport> {
    let numeric = central_differences(analytic.len(), step, loss)?;
    let (max_abs_err, rel_err) = relative_error(analytic, &numeric);
    if !rel_err.is_finite() {
        return Err(Error::NonFinite(format!("gradient check of {name}")));
    }
    Ok(LeafReport {
        name: name.to_string(),
        entries: analytic.len(),
        max_abs_err,
        rel_err,
        passed: rel_err < tolerance,
    })
}

fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap<f64> {
    FeatureMap::from_fn(c, h, w, |_, _, _| rng.gen_range(-1.0..1.0))
}

/// Frame pair: a texture and its one-pixel shift, lightly perturbed so the
/// motion is not exactly a translation.
fn frame_pair(rng: &mut ChaCha8Rng, n: usize) -> (FeatureMap<f64>, FeatureMap<f64>) {
    let f1: FeatureMap<f64> = texture(n, n, rng);
    let noise = random_map(rng, 1, n, n).scale(4.0);
    let f2 = shift_circular(&f1, 1, 0).add(&noise).expect("same shape");
    (f1, f2)
}

fn multi_channel(rng: &mut ChaCha8Rng, c: usize, n: usize, shifts: usize) -> Vec<FeatureMap<f64>> {
    let planes: Vec<FeatureMap<f64>> = (0..c)
        .map(|_| texture(n, n, rng).scale(1.0 / 255.0))
        .collect();
    (0..shifts)
        .map(|s| {
            let moved: Vec<_> = planes
                .iter()
                .map(|p| shift_circular(p, s as i64, 0))
                .collect();
            FeatureMap::stack(&moved).expect("same shape")
        })
        .collect()
}

fn flow_loss(flow: &FlowField<f64>, rx: &FeatureMap<f64>, ry: &FeatureMap<f64>) -> Result<f64> {
    Ok(flow.ux.dot(rx)? + flow.uy.dot(ry)?)
}

fn perturb_flow_param(p: &mut FlowParams<f64>, name: &str, i: usize, d: f64) {
    match name {
        "d_tau" => p.tau += d,
        "d_lambda" => p.lambda += d,
        "d_theta" => p.theta += d,
        "d_wx" => p.w_x.weights_mut()[i] += d,
        "d_wy" => p.w_y.weights_mut()[i] += d,
        "d_sobel_x" => p.sobel_x.weights_mut()[i] += d,
        "d_sobel_y" => p.sobel_y.weights_mut()[i] += d,
        _ => unreachable!("unknown flow leaf {name}"),
    }
}

fn group_enabled(flags: LearnFlags, name: &str) -> bool {
    match name {
        "d_tau" | "d_lambda" | "d_theta" => flags.scalars,
        "d_wx" | "d_wy" => flags.divergence,
        _ => flags.sobel,
    }
}

/// Flow-parameter and input leaves of the single-channel iteration.
fn check_flow(
    cfg: &GradcheckConfig,
    rng: &mut ChaCha8Rng,
    out: &mut Vec<LeafReport>,
) -> Result<()> {
    let n = cfg.size;
    let (f1, f2) = frame_pair(rng, n);
    let rx = random_map(rng, 1, n, n);
    let ry = random_map(rng, 1, n, n);
    let params = FlowParams::<f64>::default();
    let iters = cfg.iterations;
    let (_, tape) = rep_flow_forward(&f1, &f2, &params, iters)?;
    let up = FlowField::new(rx.clone(), ry.clone())?;
    let grads = rep_flow_backward(&tape, &up)?;

    for (name, analytic) in grads.params.leaves() {
        if !group_enabled(cfg.groups.flow, name) {
            continue;
        }
        out.push(leaf(name, &analytic, cfg.step, cfg.tolerance, |i, d| {
            let mut p = params.clone();
            perturb_flow_param(&mut p, name, i, d);
            flow_loss(&rep_flow_forward(&f1, &f2, &p, iters)?.0, &rx, &ry)
        })?);
    }
    if cfg.groups.inputs {
        out.push(leaf(
            "d_f1",
            grads.d_f1.data(),
            cfg.step,
            cfg.tolerance,
            |i, d| {
                let mut a = f1.clone();
                a.data_mut()[i] += d;
                flow_loss(&rep_flow_forward(&a, &f2, &params, iters)?.0, &rx, &ry)
            },
        )?);
        out.push(leaf(
            "d_f2",
            grads.d_f2.data(),
            cfg.step,
            cfg.tolerance,
            |i, d| {
                let mut b = f2.clone();
                b.data_mut()[i] += d;
                flow_loss(&rep_flow_forward(&f1, &b, &params, iters)?.0, &rx, &ry)
            },
        )?);
    }
    Ok(())
}

const WRAPPER_CHANNELS: usize = 2;
const WRAPPER_C_PRIME: usize = 2;

fn wrapper_weights(rng: &mut ChaCha8Rng, iterations: usize) -> LayerWeights<f64> {
    let mut w = LayerWeights::random(WRAPPER_CHANNELS, WRAPPER_C_PRIME, iterations, rng);
    for b in &mut w.expand.bias {
        *b = rng.gen_range(-0.5..0.5);
    }
    w
}

/// Reduce and expand leaves of the channel wrapper.
fn check_layer(
    cfg: &GradcheckConfig,
    rng: &mut ChaCha8Rng,
    out: &mut Vec<LeafReport>,
) -> Result<()> {
    let n = cfg.size;
    let frames = multi_channel(rng, WRAPPER_CHANNELS, n, 2);
    let (ft, ft1) = (&frames[0], &frames[1]);
    let weights = wrapper_weights(rng, cfg.iterations);
    let r = random_map(rng, WRAPPER_CHANNELS, n, n);
    let (_, tape) = layer_forward_taped(ft, ft1, &weights)?;
    let g = layer_backward(&tape, &weights, &r)?;
    let loss = |w: &LayerWeights<f64>| layer_forward(ft, ft1, w)?.dot(&r);

    out.push(leaf(
        "d_reduce",
        &g.d_reduce,
        cfg.step,
        cfg.tolerance,
        |i, d| {
            let mut w = weights.clone();
            w.reduce.weights[i] += d;
            loss(&w)
        },
    )?);
    out.push(leaf(
        "d_expand",
        &g.d_expand.weights,
        cfg.step,
        cfg.tolerance,
        |i, d| {
            let mut w = weights.clone();
            w.expand.weights[i] += d;
            loss(&w)
        },
    )?);
    out.push(leaf(
        "d_expand_bias",
        &g.d_expand.bias,
        cfg.step,
        cfg.tolerance,
        |i, d| {
            let mut w = weights.clone();
            w.expand.bias[i] += d;
            loss(&w)
        },
    )?);
    Ok(())
}

/// Weights of the intermediate convolution of flow-conv-flow. Its bias is not
/// checked: stage b normalizes every channel, which cancels a constant offset,
/// so that gradient is identically zero.
fn check_fcf(cfg: &GradcheckConfig, rng: &mut ChaCha8Rng, out: &mut Vec<LeafReport>) -> Result<()> {
    let n = cfg.size;
    let frames = multi_channel(rng, WRAPPER_CHANNELS, n, 3);
    let wa = wrapper_weights(rng, cfg.iterations);
    let wb = wrapper_weights(rng, cfg.iterations);
    let mid = ConvLayer::random(
        WRAPPER_CHANNELS,
        WRAPPER_CHANNELS,
        3,
        3,
        PaddingSpec::replicate(1),
        rng,
    );
    let r = random_map(rng, WRAPPER_CHANNELS, n, n);
    let (_, tape) = flow_conv_flow_taped(&frames[0], &frames[1], &frames[2], &wa, &mid, &wb)?;
    let g = flow_conv_flow_backward(&tape, &wa, &mid, &wb, &r)?;
    out.push(leaf(
        "d_mid",
        &g.mid.weights,
        cfg.step,
        cfg.tolerance,
        |i, d| {
            let mut m = mid.clone();
            m.weights[i] += d;
            flow_conv_flow(&frames[0], &frames[1], &frames[2], &wa, &m, &wb)?.dot(&r)
        },
    )?);
    Ok(())
}

/// Runs every enabled check. Fixtures depend only on `seed`, `size` and the
/// enabled groups.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    if cfg.iterations == 0 {
        return Err(Error::invalid("iterations must be >= 1"));
    }
    if cfg.size < 4 {
        return Err(Error::invalid("fixture size must be >= 4"));
    }
    if !(cfg.step > 0.0 && cfg.step.is_finite()) {
        return Err(Error::invalid("finite-difference step must be > 0"));
    }
    let mut leaves = Vec::new();
    if cfg.groups.flow.any() || cfg.groups.inputs {
        check_flow(cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed), &mut leaves)?;
    }
    if cfg.groups.layer {
        check_layer(
            cfg,
            &mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x1a7e),
            &mut leaves,
        )?;
    }
    if cfg.groups.fcf {
        check_fcf(
            cfg,
            &mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xfcf),
            &mut leaves,
        )?;
    }
    Ok(GradcheckReport {
        iterations: cfg.iterations,
        tolerance: cfg.tolerance,
        leaves,
    })
}
