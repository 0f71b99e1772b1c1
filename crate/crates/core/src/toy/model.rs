//! A tiny video classifier: per-frame conv features, a representation-flow
//! layer over consecutive frames, a second conv stage, global pooling and a
//! linear classifier whose per-pair softmax outputs are averaged.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::data::VideoSample;
use crate::error::{Error, Result};
use crate::layer::{
    flow_conv_flow_backward, flow_conv_flow_taped, layer_backward, layer_forward_taped, step_conv,
    step_layer, ConvMomentum, FcfTape, GradientBundle, LayerMomentum, LayerTape, LayerWeights,
    LearnFlags, Sgd,
};
use crate::tensor::{ConvLayer, ConvLayerGrads, FeatureMap, PaddingSpec};

/// Floor inside the log of the cross-entropy.
pub const CE_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// one flow layer over each consecutive frame pair
    Flow,
    /// flow-conv-flow over each consecutive frame triple
    Fcf,
    /// no motion path: stage b sees the features of frame t alone
    Appearance,
}

impl ModelKind {
    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Flow => "flow",
            ModelKind::Fcf => "fcf",
            ModelKind::Appearance => "appearance",
        }
    }

    /// Frames consumed per prediction unit.
    fn window(&self) -> usize {
        match self {
            ModelKind::Fcf => 3,
            _ => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub in_channels: usize,
    /// channels produced by stage a and stage b
    pub features: usize,
    pub c_prime: usize,
    pub iterations: usize,
    pub num_classes: usize,
    pub learn: LearnFlags,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::Flow,
            in_channels: 1,
            features: 16,
            c_prime: 8,
            iterations: 10,
            num_classes: 4,
            learn: LearnFlags::DIVERGENCE_AND_SCALARS,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TinyModel {
    pub kind: ModelKind,
    /// 3x3, `in_channels -> features`, followed by ReLU and 2x2 average pooling
    pub stage_a: ConvLayer<f64>,
    pub flow: LayerWeights<f64>,
    /// intermediate convolution and second flow layer of the FcF variant
    pub mid: Option<ConvLayer<f64>>,
    pub flow_b: Option<LayerWeights<f64>>,
    /// 3x3, `features -> features`, followed by ReLU and global average pooling
    pub stage_b: ConvLayer<f64>,
    /// 1x1 convolution on the pooled `features x 1 x 1` map, i.e. a linear layer
    pub classifier: ConvLayer<f64>,
}

impl TinyModel {
    pub fn new(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        if cfg.in_channels == 0 || cfg.features == 0 || cfg.c_prime == 0 {
            return Err(Error::invalid("channel counts must be >= 1"));
        }
        if cfg.num_classes < 2 {
            return Err(Error::invalid("need at least 2 classes"));
        }
        if cfg.iterations == 0 {
            return Err(Error::invalid("iterations must be >= 1"));
        }
        let f = cfg.features;
        let same = PaddingSpec::replicate(1);
        let stage_a = ConvLayer::random(f, cfg.in_channels, 3, 3, same, rng);
        let mut flow = LayerWeights::random(f, cfg.c_prime, cfg.iterations, rng);
        flow.flow.learn = cfg.learn;
        let (mid, flow_b) = if cfg.kind == ModelKind::Fcf {
            let mut b = LayerWeights::random(f, cfg.c_prime, cfg.iterations, rng);
            b.flow.learn = cfg.learn;
            (Some(ConvLayer::random(f, f, 3, 3, same, rng)), Some(b))
        } else {
            (None, None)
        };
        let stage_b = ConvLayer::random(f, f, 3, 3, same, rng);
        let classifier = ConvLayer::random(cfg.num_classes, f, 1, 1, PaddingSpec::NONE, rng);
        Ok(TinyModel {
            kind: cfg.kind,
            stage_a,
            flow,
            mid,
            flow_b,
            stage_b,
            classifier,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.out_channels
    }

    pub fn in_channels(&self) -> usize {
        self.stage_a.in_channels
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.stage_a.out_channels;
        self.flow.validate()?;
        if self.flow.channels() != f
            || self.stage_b.in_channels != f
            || self.stage_b.out_channels != f
        {
            return Err(Error::shape(
                "stage a, flow layer and stage b disagree on feature count",
            ));
        }
        if self.classifier.in_channels != f {
            return Err(Error::shape(
                "classifier input does not match feature count",
            ));
        }
        match (self.kind, &self.mid, &self.flow_b) {
            (ModelKind::Fcf, Some(m), Some(b)) => {
                b.validate()?;
                if m.in_channels != f || m.out_channels != f || b.channels() != f {
                    return Err(Error::shape(
                        "flow-conv-flow stage has wrong channel counts",
                    ));
                }
            }
            (ModelKind::Fcf, _, _) => {
                return Err(Error::invalid("fcf model is missing its second stage"))
            }
            (_, None, None) => {}
            _ => return Err(Error::invalid("only the fcf model has a second flow stage")),
        }
        Ok(())
    }

    /// Every weight finite and every flow parameter inside its domain.
    pub fn params_valid(&self) -> bool {
        let convs = [
            Some(&self.stage_a),
            self.mid.as_ref(),
            Some(&self.stage_b),
            Some(&self.classifier),
        ];
        let layers = [Some(&self.flow), self.flow_b.as_ref()];
        let finite = |c: &ConvLayer<f64>| c.weights.iter().chain(&c.bias).all(|v| v.is_finite());
        convs.into_iter().flatten().all(finite)
            && layers
                .into_iter()
                .flatten()
                .all(|l| finite(&l.reduce) && finite(&l.expand) && l.flow.validate().is_ok())
    }

    /// Averaged class probabilities for one video.
    pub fn predict(&self, sample: &VideoSample) -> Result<Vec<f64>> {
        Ok(self.forward(sample)?.probs)
    }

    pub fn forward(&self, sample: &VideoSample) -> Result<ForwardPass> {
        let frames = &sample.frames;
        let window = self.kind.window();
        if frames.len() < window {
            return Err(Error::invalid(format!(
                "{} model needs at least {window} frames, got {}",
                self.kind.name(),
                frames.len()
            )));
        }
        for f in frames {
            f.ensure_same_shape(&frames[0], "video frames")?;
        }
        let mut pre_a = Vec::with_capacity(frames.len());
        let mut pooled = Vec::with_capacity(frames.len());
        for f in frames {
            let pre = self.stage_a.forward(f)?;
            pooled.push(avg_pool2(&relu(&pre))?);
            pre_a.push(pre);
        }
        let units = frames.len() + 1 - window;
        let mut unit_tapes = Vec::with_capacity(units);
        let mut unit_probs = Vec::with_capacity(units);
        for t in 0..units {
            let (r, motion) = match self.kind {
                ModelKind::Flow => {
                    let (r, tape) = layer_forward_taped(&pooled[t], &pooled[t + 1], &self.flow)?;
                    (r, Motion::Flow(Box::new(tape)))
                }
                ModelKind::Fcf => {
                    let (mid, b) = self.fcf_parts()?;
                    let (r, tape) = flow_conv_flow_taped(
                        &pooled[t],
                        &pooled[t + 1],
                        &pooled[t + 2],
                        &self.flow,
                        mid,
                        b,
                    )?;
                    (r, Motion::Fcf(Box::new(tape)))
                }
                ModelKind::Appearance => (pooled[t].clone(), Motion::Identity),
            };
            let pre_b = self.stage_b.forward(&r)?;
            let pooled_b = global_avg_pool(&relu(&pre_b));
            let logits = self.classifier.forward(&pooled_b)?;
            let p = softmax(logits.data());
            unit_probs.push(p);
            unit_tapes.push(UnitTape {
                r,
                motion,
                pre_b,
                pooled_b,
            });
        }
        let k = self.num_classes();
        let mut probs = vec![0.0; k];
        for p in &unit_probs {
            for (a, b) in probs.iter_mut().zip(p) {
                *a += b;
            }
        }
        for a in &mut probs {
            *a /= units as f64;
        }
        Ok(ForwardPass {
            probs,
            unit_probs,
            tape: ModelTape {
                inputs: frames.clone(),
                pre_a,
                units: unit_tapes,
            },
        })
    }

    fn fcf_parts(&self) -> Result<(&ConvLayer<f64>, &LayerWeights<f64>)> {
        match (&self.mid, &self.flow_b) {
            (Some(m), Some(b)) => Ok((m, b)),
            _ => Err(Error::invalid("fcf model is missing its second stage")),
        }
    }

    /// Gradients of `weight * cross_entropy(probs, label)`.
    pub fn backward(&self, pass: &ForwardPass, label: usize, weight: f64) -> Result<ModelGrads> {
        let k = self.num_classes();
        if label >= k {
            return Err(Error::invalid(format!(
                "label {label} out of range for {k} classes"
            )));
        }
        let mut grads = ModelGrads::zeros_like(self);
        let p_bar = pass.probs[label];
        if p_bar <= CE_EPS {
            // the log floor is active; the loss is locally constant
            return Ok(grads);
        }
        let tape = &pass.tape;
        let units = tape.units.len();
        let g_pbar = -weight / p_bar / units as f64;
        let (h, w) = (tape.pre_a[0].height() / 2, tape.pre_a[0].width() / 2);
        let f = self.stage_a.out_channels;
        let mut d_pooled = vec![FeatureMap::zeros(f, h, w); tape.inputs.len()];

        for (t, (unit, p)) in tape.units.iter().zip(&pass.unit_probs).enumerate() {
            let dz: Vec<f64> = (0..k)
                .map(|j| g_pbar * p[label] * (if j == label { 1.0 } else { 0.0 } - p[j]))
                .collect();
            let dz = FeatureMap::new(k, 1, 1, dz)?;
            let (d_pool_b, g_cls) = self.classifier.backward(&unit.pooled_b, &dz)?;
            grads.classifier.accumulate(&g_cls);
            let d_relu_b =
                global_avg_pool_backward(&d_pool_b, unit.pre_b.height(), unit.pre_b.width());
            let d_pre_b = relu_backward(&unit.pre_b, &d_relu_b)?;
            let (d_r, g_b) = self.stage_b.backward(&unit.r, &d_pre_b)?;
            grads.stage_b.accumulate(&g_b);
            match &unit.motion {
                Motion::Flow(lt) => {
                    let g = layer_backward(lt, &self.flow, &d_r)?;
                    grads.flow.accumulate_params(&g);
                    add_into(&mut d_pooled[t], &g.d_ft)?;
                    add_into(&mut d_pooled[t + 1], &g.d_ft1)?;
                }
                Motion::Fcf(ft) => {
                    let (mid, b) = self.fcf_parts()?;
                    let g = flow_conv_flow_backward(ft, &self.flow, mid, b, &d_r)?;
                    grads.flow.accumulate_params(&g.a);
                    if let Some(m) = grads.mid.as_mut() {
                        m.accumulate(&g.mid);
                    }
                    if let Some(gb) = grads.flow_b.as_mut() {
                        gb.accumulate_params(&g.b);
                    }
                    add_into(&mut d_pooled[t], &g.d_ft)?;
                    add_into(&mut d_pooled[t + 1], &g.d_ft1)?;
                    add_into(&mut d_pooled[t + 2], &g.d_ft2)?;
                }
                Motion::Identity => add_into(&mut d_pooled[t], &d_r)?,
            }
        }
        for ((x, pre), dp) in tape.inputs.iter().zip(&tape.pre_a).zip(&d_pooled) {
            let d_relu = avg_pool2_backward(dp, pre.height(), pre.width());
            let d_pre = relu_backward(pre, &d_relu)?;
            let (_, g_a) = self.stage_a.backward(x, &d_pre)?;
            grads.stage_a.accumulate(&g_a);
        }
        Ok(grads)
    }

    /// One SGD-with-momentum step. Flow parameters move at
    /// `lr * flow_lr_scale` and only where their learn flags are on.
    pub fn step(&mut self, grads: &ModelGrads, sgd: &Sgd, state: &mut ModelMomentum) -> Result<()> {
        step_conv(
            &mut self.stage_a,
            &grads.stage_a,
            sgd.lr,
            sgd.momentum,
            &mut state.stage_a,
            true,
            "d_stage_a",
        )?;
        step_layer(&mut self.flow, &grads.flow, sgd, &mut state.flow)?;
        if let (Some(m), Some(g), Some(s)) =
            (self.mid.as_mut(), grads.mid.as_ref(), state.mid.as_mut())
        {
            step_conv(m, g, sgd.lr, sgd.momentum, s, true, "d_mid")?;
        }
        if let (Some(b), Some(g), Some(s)) = (
            self.flow_b.as_mut(),
            grads.flow_b.as_ref(),
            state.flow_b.as_mut(),
        ) {
            step_layer(b, g, sgd, s)?;
        }
        step_conv(
            &mut self.stage_b,
            &grads.stage_b,
            sgd.lr,
            sgd.momentum,
            &mut state.stage_b,
            true,
            "d_stage_b",
        )?;
        step_conv(
            &mut self.classifier,
            &grads.classifier,
            sgd.lr,
            sgd.momentum,
            &mut state.classifier,
            true,
            "d_classifier",
        )
    }
}

#[derive(Clone, Debug)]
enum Motion {
    Flow(Box<LayerTape<f64>>),
    Fcf(Box<FcfTape<f64>>),
    Identity,
}

#[derive(Clone, Debug)]
struct UnitTape {
    r: FeatureMap<f64>,
    motion: Motion,
    pre_b: FeatureMap<f64>,
    pooled_b: FeatureMap<f64>,
}

#[derive(Clone, Debug)]
pub struct ModelTape {
    inputs: Vec<FeatureMap<f64>>,
    pre_a: Vec<FeatureMap<f64>>,
    units: Vec<UnitTape>,
}

#[derive(Clone, Debug)]
pub struct ForwardPass {
    /// class probabilities averaged over prediction units
    pub probs: Vec<f64>,
    pub unit_probs: Vec<Vec<f64>>,
    pub tape: ModelTape,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads {
    pub stage_a: ConvLayerGrads<f64>,
    /// only the parameter fields are meaningful
    pub flow: GradientBundle<f64>,
    pub mid: Option<ConvLayerGrads<f64>>,
    pub flow_b: Option<GradientBundle<f64>>,
    pub stage_b: ConvLayerGrads<f64>,
    pub classifier: ConvLayerGrads<f64>,
}

impl ModelGrads {
    pub fn zeros_like(m: &TinyModel) -> Self {
        ModelGrads {
            stage_a: ConvLayerGrads::zeros_like(&m.stage_a),
            flow: GradientBundle::zeros_like(&m.flow, 0, 0),
            mid: m.mid.as_ref().map(ConvLayerGrads::zeros_like),
            flow_b: m
                .flow_b
                .as_ref()
                .map(|b| GradientBundle::zeros_like(b, 0, 0)),
            stage_b: ConvLayerGrads::zeros_like(&m.stage_b),
            classifier: ConvLayerGrads::zeros_like(&m.classifier),
        }
    }

    pub fn accumulate(&mut self, o: &ModelGrads) {
        self.stage_a.accumulate(&o.stage_a);
        self.flow.accumulate_params(&o.flow);
        if let (Some(a), Some(b)) = (self.mid.as_mut(), o.mid.as_ref()) {
            a.accumulate(b);
        }
        if let (Some(a), Some(b)) = (self.flow_b.as_mut(), o.flow_b.as_ref()) {
            a.accumulate_params(b);
        }
        self.stage_b.accumulate(&o.stage_b);
        self.classifier.accumulate(&o.classifier);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelMomentum {
    pub stage_a: ConvMomentum<f64>,
    pub flow: LayerMomentum<f64>,
    pub mid: Option<ConvMomentum<f64>>,
    pub flow_b: Option<LayerMomentum<f64>>,
    pub stage_b: ConvMomentum<f64>,
    pub classifier: ConvMomentum<f64>,
}

impl ModelMomentum {
    pub fn zeros_like(m: &TinyModel) -> Self {
        ModelMomentum {
            stage_a: ConvMomentum::zeros_like(&m.stage_a),
            flow: LayerMomentum::zeros_like(&m.flow),
            mid: m.mid.as_ref().map(ConvMomentum::zeros_like),
            flow_b: m.flow_b.as_ref().map(LayerMomentum::zeros_like),
            stage_b: ConvMomentum::zeros_like(&m.stage_b),
            classifier: ConvMomentum::zeros_like(&m.classifier),
        }
    }
}

/// `-ln(max(p[label], 1e-12))`.
pub fn cross_entropy(probs: &[f64], label: usize) -> Result<f64> {
    let p = probs.get(label).ok_or_else(|| {
        Error::invalid(format!(
            "label {label} out of range for {} classes",
            probs.len()
        ))
    })?;
    Ok(-p.max(CE_EPS).ln())
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn add_into(dst: &mut FeatureMap<f64>, src: &FeatureMap<f64>) -> Result<()> {
    dst.ensure_same_shape(src, "gradient accumulation")?;
    for (a, b) in dst.data_mut().iter_mut().zip(src.data()) {
        *a += b;
    }
    Ok(())
}

fn relu(x: &FeatureMap<f64>) -> FeatureMap<f64> {
    x.map(|v| v.max(0.0))
}

fn relu_backward(pre: &FeatureMap<f64>, g: &FeatureMap<f64>) -> Result<FeatureMap<f64>> {
    pre.ensure_same_shape(g, "relu backward")?;
    let data = pre
        .data()
        .iter()
        .zip(g.data())
        .map(|(p, g)| if *p > 0.0 { *g } else { 0.0 })
        .collect();
    FeatureMap::new(pre.channels(), pre.height(), pre.width(), data)
}

/// 2x2 average pooling, stride 2; an odd last row/column is dropped.
fn avg_pool2(x: &FeatureMap<f64>) -> Result<FeatureMap<f64>> {
    let (h, w) = (x.height() / 2, x.width() / 2);
    if h == 0 || w == 0 {
        return Err(Error::shape("average pooling needs at least 2x2 input"));
    }
    Ok(FeatureMap::from_fn(x.channels(), h, w, |c, y, xx| {
        0.25 * (x.get(c, 2 * y, 2 * xx)
            + x.get(c, 2 * y, 2 * xx + 1)
            + x.get(c, 2 * y + 1, 2 * xx)
            + x.get(c, 2 * y + 1, 2 * xx + 1))
    }))
}

fn avg_pool2_backward(g: &FeatureMap<f64>, h: usize, w: usize) -> FeatureMap<f64> {
    FeatureMap::from_fn(g.channels(), h, w, |c, y, x| {
        let (py, px) = (y / 2, x / 2);
        if py < g.height() && px < g.width() {
            0.25 * g.get(c, py, px)
        } else {
            0.0
        }
    })
}

fn global_avg_pool(x: &FeatureMap<f64>) -> FeatureMap<f64> {
    let n = x.plane_len() as f64;
    FeatureMap::from_fn(x.channels(), 1, 1, |c, _, _| {
        x.channel(c).iter().sum::<f64>() / n
    })
}

fn global_avg_pool_backward(g: &FeatureMap<f64>, h: usize, w: usize) -> FeatureMap<f64> {
    let n = (h * w) as f64;
    FeatureMap::from_fn(g.channels(), h, w, |c, _, _| g.get(c, 0, 0) / n)
}
