//! Channel reduce -> normalize -> per-channel flow -> stack -> expand, and the
//! two-stage flow-conv-flow composition built from it.

use rand::Rng;

use super::flow::{rep_flow_backward, rep_flow_forward, FlowParamGrads, FlowParams, FlowTape};
use super::normalize::{normalize_255, normalize_255_backward, NormalizeTape};
use crate::error::{Error, Result};
use crate::field::FlowField;
use crate::tensor::{ConvLayer, ConvLayerGrads, FeatureMap, PaddingSpec, Real};

pub const DEFAULT_C_PRIME: usize = 32;

/// Weights of one representation-flow layer.
///
/// The reduce convolution has no learnable bias: per-channel normalization
/// removes any constant offset, so its bias is held at zero.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights<T> {
    /// 1x1, `C -> C'`
    pub reduce: ConvLayer<T>,
    /// 3x3 with replicate padding, `2C' -> C`
    pub expand: ConvLayer<T>,
    pub flow: FlowParams<T>,
    pub iterations: usize,
}

impl<T: Real> LayerWeights<T> {
    pub fn new(
        reduce: ConvLayer<T>,
        expand: ConvLayer<T>,
        flow: FlowParams<T>,
        iterations: usize,
    ) -> Result<Self> {
        let w = LayerWeights {
            reduce,
            expand,
            flow,
            iterations,
        };
        w.validate()?;
        Ok(w)
    }

    /// Random reduce/expand weights, default flow parameters.
    pub fn random(channels: usize, c_prime: usize, iterations: usize, rng: &mut impl Rng) -> Self {
        LayerWeights {
            reduce: ConvLayer::random(c_prime, channels, 1, 1, PaddingSpec::NONE, rng),
            expand: ConvLayer::random(channels, 2 * c_prime, 3, 3, PaddingSpec::replicate(1), rng),
            flow: FlowParams::default(),
            iterations,
        }
    }

    pub fn channels(&self) -> usize {
        self.reduce.in_channels
    }

    pub fn c_prime(&self) -> usize {
        self.reduce.out_channels
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.reduce.in_channels;
        let cp = self.reduce.out_channels;
        if c == 0 || cp == 0 {
            return Err(Error::invalid("channel counts must be >= 1"));
        }
        if self.iterations == 0 {
            return Err(Error::invalid("iterations must be >= 1"));
        }
        if (self.reduce.kernel_rows, self.reduce.kernel_cols) != (1, 1)
            || self.reduce.padding != PaddingSpec::NONE
        {
            return Err(Error::invalid("reduce must be an unpadded 1x1 convolution"));
        }
        if self.expand.in_channels != 2 * cp || self.expand.out_channels != c {
            return Err(Error::shape(format!(
                "expand maps {} -> {}, expected {} -> {c}",
                self.expand.in_channels,
                self.expand.out_channels,
                2 * cp
            )));
        }
        if (self.expand.kernel_rows, self.expand.kernel_cols) != (3, 3)
            || self.expand.padding != PaddingSpec::replicate(1)
        {
            return Err(Error::invalid(
                "expand must be a 3x3 convolution with replicate padding 1",
            ));
        }
        self.flow.validate()
    }
}

/// Gradients for every learnable leaf of a [`LayerWeights`] plus both inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientBundle<T> {
    pub flow: FlowParamGrads<T>,
    /// gradient of the 1x1 reduce weights (`[C'][C]`)
    pub d_reduce: Vec<T>,
    pub d_expand: ConvLayerGrads<T>,
    pub d_ft: FeatureMap<T>,
    pub d_ft1: FeatureMap<T>,
}

impl<T: Real> GradientBundle<T> {
    /// Adds the parameter gradients of `other`; input gradients are left alone.
    pub fn accumulate_params(&mut self, other: &GradientBundle<T>) {
        self.flow.accumulate(&other.flow);
        for (a, b) in self.d_reduce.iter_mut().zip(&other.d_reduce) {
            *a += *b;
        }
        self.d_expand.accumulate(&other.d_expand);
    }

    pub fn zeros_like(weights: &LayerWeights<T>, h: usize, w: usize) -> Self {
        let c = weights.channels();
        GradientBundle {
            flow: FlowParamGrads::zeros(),
            d_reduce: vec![T::zero(); weights.reduce.weights.len()],
            d_expand: ConvLayerGrads::zeros_like(&weights.expand),
            d_ft: FeatureMap::zeros(c, h, w),
            d_ft1: FeatureMap::zeros(c, h, w),
        }
    }
}

/// Forward record of [`layer_forward_taped`].
#[derive(Clone, Debug)]
pub struct LayerTape<T> {
    ft: FeatureMap<T>,
    ft1: FeatureMap<T>,
    norm_t: NormalizeTape<T>,
    norm_t1: NormalizeTape<T>,
    flows: Vec<FlowTape<T>>,
    stacked: FeatureMap<T>,
}

impl<T: Real> LayerTape<T> {
    /// Interleaved flow stack `(u_x ch0, u_y ch0, u_x ch1, ...)`.
    pub fn flow_stack(&self) -> &FeatureMap<T> {
        &self.stacked
    }
}

/// Interleaves per-channel flows into a `2C'` channel map.
pub fn stack_flows<T: Real>(flows: &[FlowField<T>]) -> Result<FeatureMap<T>> {
    let planes: Vec<FeatureMap<T>> = flows
        .iter()
        .flat_map(|f| [f.ux.clone(), f.uy.clone()])
        .collect();
    FeatureMap::stack(&planes)
}

#[cfg(feature = "parallel")]
pub(crate) fn per_channel<R: Send>(
    n: usize,
    f: impl Fn(usize) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    use rayon::prelude::*;
    (0..n).into_par_iter().map(&f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn per_channel<R: Send>(
    n: usize,
    f: impl Fn(usize) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    (0..n).map(f).collect()
}

pub fn layer_forward<T: Real>(
    ft: &FeatureMap<T>,
    ft1: &FeatureMap<T>,
    weights: &LayerWeights<T>,
) -> Result<FeatureMap<T>> {
    Ok(layer_forward_taped(ft, ft1, weights)?.0)
}

pub fn layer_forward_taped<T: Real>(
    ft: &FeatureMap<T>,
    ft1: &FeatureMap<T>,
    weights: &LayerWeights<T>,
) -> Result<(FeatureMap<T>, LayerTape<T>)> {
    ft.ensure_same_shape(ft1, "layer frame pair")?;
    if ft.channels() != weights.channels() {
        return Err(Error::shape(format!(
            "layer expects {} channels, got {}",
            weights.channels(),
            ft.channels()
        )));
    }
    weights.validate()?;
    let (nt, norm_t) = normalize_255(&weights.reduce.forward(ft)?)?;
    let (nt1, norm_t1) = normalize_255(&weights.reduce.forward(ft1)?)?;
    let results = per_channel(weights.c_prime(), |c| {
        rep_flow_forward(
            &nt.plane(c),
            &nt1.plane(c),
            &weights.flow,
            weights.iterations,
        )
    })?;
    let (flows, tapes): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let stacked = stack_flows(&flows)?;
    let out = weights.expand.forward(&stacked)?;
    let tape = LayerTape {
        ft: ft.clone(),
        ft1: ft1.clone(),
        norm_t,
        norm_t1,
        flows: tapes,
        stacked,
    };
    Ok((out, tape))
}

pub fn layer_backward<T: Real>(
    tape: &LayerTape<T>,
    weights: &LayerWeights<T>,
    grad_out: &FeatureMap<T>,
) -> Result<GradientBundle<T>> {
    let (d_stacked, d_expand) = weights.expand.backward(&tape.stacked, grad_out)?;
    let (h, w) = (tape.ft.height(), tape.ft.width());
    let cp = weights.c_prime();
    let per = per_channel(cp, |c| {
        let up = FlowField::new(d_stacked.plane(2 * c), d_stacked.plane(2 * c + 1))?;
        rep_flow_backward(&tape.flows[c], &up)
    })?;
    let mut flow = FlowParamGrads::zeros();
    let mut d_nt = FeatureMap::zeros(cp, h, w);
    let mut d_nt1 = FeatureMap::zeros(cp, h, w);
    for (c, g) in per.iter().enumerate() {
        flow.accumulate(&g.params);
        d_nt.channel_mut(c).copy_from_slice(g.d_f1.data());
        d_nt1.channel_mut(c).copy_from_slice(g.d_f2.data());
    }
    let d_rt = normalize_255_backward(&tape.norm_t, &d_nt)?;
    let d_rt1 = normalize_255_backward(&tape.norm_t1, &d_nt1)?;
    let (d_ft, g_a) = weights.reduce.backward(&tape.ft, &d_rt)?;
    let (d_ft1, g_b) = weights.reduce.backward(&tape.ft1, &d_rt1)?;
    let d_reduce = g_a
        .weights
        .iter()
        .zip(&g_b.weights)
        .map(|(a, b)| *a + *b)
        .collect();
    Ok(GradientBundle {
        flow,
        d_reduce,
        d_expand,
        d_ft,
        d_ft1,
    })
}

/// Forward record of [`flow_conv_flow_taped`].
#[derive(Clone, Debug)]
pub struct FcfTape<T> {
    first: LayerTape<T>,
    second: LayerTape<T>,
    a1: FeatureMap<T>,
    a2: FeatureMap<T>,
    last: LayerTape<T>,
}

impl<T: Real> FcfTape<T> {
    /// Flow stack of the second-stage layer.
    pub fn stage_b_flows(&self) -> &FeatureMap<T> {
        self.last.flow_stack()
    }

    pub fn stage_a_flows(&self) -> (&FeatureMap<T>, &FeatureMap<T>) {
        (self.first.flow_stack(), self.second.flow_stack())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FcfGrads<T> {
    /// summed over both stage-a applications
    pub a: GradientBundle<T>,
    pub mid: ConvLayerGrads<T>,
    pub b: GradientBundle<T>,
    pub d_ft: FeatureMap<T>,
    pub d_ft1: FeatureMap<T>,
    pub d_ft2: FeatureMap<T>,
}

/// `flow_b(mid(flow_a(Ft, Ft1)), mid(flow_a(Ft1, Ft2)))`.
pub fn flow_conv_flow<T: Real>(
    ft: &FeatureMap<T>,
    ft1: &FeatureMap<T>,
    ft2: &FeatureMap<T>,
    weights_a: &LayerWeights<T>,
    mid: &ConvLayer<T>,
    weights_b: &LayerWeights<T>,
) -> Result<FeatureMap<T>> {
    Ok(flow_conv_flow_taped(ft, ft1, ft2, weights_a, mid, weights_b)?.0)
}

pub fn flow_conv_flow_taped<T: Real>(
    ft: &FeatureMap<T>,
    ft1: &FeatureMap<T>,
    ft2: &FeatureMap<T>,
    weights_a: &LayerWeights<T>,
    mid: &ConvLayer<T>,
    weights_b: &LayerWeights<T>,
) -> Result<(FeatureMap<T>, FcfTape<T>)> {
    ft.ensure_same_shape(ft1, "flow-conv-flow frames")?;
    ft1.ensure_same_shape(ft2, "flow-conv-flow frames")?;
    let (a1, first) = layer_forward_taped(ft, ft1, weights_a)?;
    let (a2, second) = layer_forward_taped(ft1, ft2, weights_a)?;
    let m1 = mid.forward(&a1)?;
    let m2 = mid.forward(&a2)?;
    if m1.shape() != (weights_b.channels(), ft.height(), ft.width()) {
        return Err(Error::shape(format!(
            "mid convolution produces {:?}, stage b expects {} channels at {}x{}",
            m1.shape(),
            weights_b.channels(),
            ft.height(),
            ft.width()
        )));
    }
    let (out, last) = layer_forward_taped(&m1, &m2, weights_b)?;
    Ok((
        out,
        FcfTape {
            first,
            second,
            a1,
            a2,
            last,
        },
    ))
}

pub fn flow_conv_flow_backward<T: Real>(
    tape: &FcfTape<T>,
    weights_a: &LayerWeights<T>,
    mid: &ConvLayer<T>,
    weights_b: &LayerWeights<T>,
    grad_out: &FeatureMap<T>,
) -> Result<FcfGrads<T>> {
    let b = layer_backward(&tape.last, weights_b, grad_out)?;
    let (d_a1, mut g_mid) = mid.backward(&tape.a1, &b.d_ft)?;
    let (d_a2, g_mid2) = mid.backward(&tape.a2, &b.d_ft1)?;
    g_mid.accumulate(&g_mid2);
    let mut a = layer_backward(&tape.first, weights_a, &d_a1)?;
    let a2 = layer_backward(&tape.second, weights_a, &d_a2)?;
    a.accumulate_params(&a2);
    let d_ft = a.d_ft.clone();
    let d_ft1 = a.d_ft1.add(&a2.d_ft)?;
    let d_ft2 = a2.d_ft1.clone();
    a.d_ft1 = d_ft1.clone();
    Ok(FcfGrads {
        a,
        mid: g_mid,
        b,
        d_ft,
        d_ft1,
        d_ft2,
    })
}
