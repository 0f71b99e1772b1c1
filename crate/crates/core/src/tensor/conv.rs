use rand::Rng;

use super::{FeatureMap, Kernel2D, PadMode, PaddingSpec, Real};
use crate::error::{Error, Result};

/// Pads a row-major `height x width` plane.
pub fn pad<T: Real>(src: &[T], height: usize, width: usize, spec: &PaddingSpec) -> Vec<T> {
    debug_assert_eq!(src.len(), height * width);
    let (ph, pw) = spec.padded_dims(height, width);
    let mut out = vec![T::zero(); ph * pw];
    match spec.mode {
        PadMode::Zero => {
            for y in 0..height {
                let dst = (y + spec.top) * pw + spec.left;
                out[dst..dst + width].copy_from_slice(&src[y * width..(y + 1) * width]);
            }
        }
        PadMode::Replicate => {
            for py in 0..ph {
                let sy = clamp_index(py, spec.top, height);
                for px in 0..pw {
                    let sx = clamp_index(px, spec.left, width);
                    out[py * pw + px] = src[sy * width + sx];
                }
            }
        }
    }
    out
}

/// Adjoint of [`pad`]: folds a gradient on the padded plane back onto the
/// source plane.
pub fn pad_adjoint<T: Real>(grad: &[T], height: usize, width: usize, spec: &PaddingSpec) -> Vec<T> {
    let (ph, pw) = spec.padded_dims(height, width);
    debug_assert_eq!(grad.len(), ph * pw);
    let mut out = vec![T::zero(); height * width];
    match spec.mode {
        PadMode::Zero => {
            for y in 0..height {
                let s = (y + spec.top) * pw + spec.left;
                out[y * width..(y + 1) * width].copy_from_slice(&grad[s..s + width]);
            }
        }
        PadMode::Replicate => {
            for py in 0..ph {
                let sy = clamp_index(py, spec.top, height);
                for px in 0..pw {
                    let sx = clamp_index(px, spec.left, width);
                    out[sy * width + sx] += grad[py * pw + px];
                }
            }
        }
    }
    out
}

#[inline]
fn clamp_index(padded: usize, before: usize, len: usize) -> usize {
    padded.saturating_sub(before).min(len - 1)
}

/// Valid correlation of a `sh x sw` plane: `out[y][x] = sum k[i][j] * src[y+i][x+j]`.
/// The caller guarantees the kernel fits.
pub fn correlate<T: Real>(src: &[T], sh: usize, sw: usize, k: &Kernel2D<T>) -> Vec<T> {
    let (oh, ow) = (sh + 1 - k.rows(), sw + 1 - k.cols());
    let mut out = vec![T::zero(); oh * ow];
    correlate_accumulate(src, sw, k.weights(), k.rows(), k.cols(), &mut out, oh, ow);
    out
}

#[inline]
#[allow(clippy::too_many_arguments)]
fn correlate_accumulate<T: Real>(
    src: &[T],
    sw: usize,
    k: &[T],
    kr: usize,
    kc: usize,
    out: &mut [T],
    oh: usize,
    ow: usize,
) {
    for y in 0..oh {
        let row = &mut out[y * ow..(y + 1) * ow];
        for i in 0..kr {
            let srow = &src[(y + i) * sw..(y + i) * sw + ow + kc - 1];
            for j in 0..kc {
                let w = k[i * kc + j];
                if w == T::zero() {
                    continue;
                }
                for (o, s) in row.iter_mut().zip(&srow[j..j + ow]) {
                    *o += w * *s;
                }
            }
        }
    }
}

/// Gradient of [`correlate`] with respect to its source plane.
pub fn correlate_adjoint_input<T: Real>(
    grad_out: &[T],
    sh: usize,
    sw: usize,
    k: &Kernel2D<T>,
) -> Vec<T> {
    let mut gsrc = vec![T::zero(); sh * sw];
    correlate_adjoint_input_accumulate(
        grad_out,
        sw,
        k.weights(),
        k.rows(),
        k.cols(),
        &mut gsrc,
        sh,
    );
    gsrc
}

#[inline]
fn correlate_adjoint_input_accumulate<T: Real>(
    grad_out: &[T],
    sw: usize,
    k: &[T],
    kr: usize,
    kc: usize,
    gsrc: &mut [T],
    sh: usize,
) {
    let (oh, ow) = (sh + 1 - kr, sw + 1 - kc);
    for y in 0..oh {
        let grow = &grad_out[y * ow..(y + 1) * ow];
        for i in 0..kr {
            let dst = &mut gsrc[(y + i) * sw..(y + i) * sw + ow + kc - 1];
            for j in 0..kc {
                let w = k[i * kc + j];
                if w == T::zero() {
                    continue;
                }
                for (d, g) in dst[j..j + ow].iter_mut().zip(grow) {
                    *d += w * *g;
                }
            }
        }
    }
}

/// Gradient of [`correlate`] with respect to the kernel weights.
pub fn correlate_adjoint_kernel<T: Real>(
    src: &[T],
    sh: usize,
    sw: usize,
    grad_out: &[T],
    kr: usize,
    kc: usize,
) -> Vec<T> {
    let mut gk = vec![T::zero(); kr * kc];
    correlate_adjoint_kernel_accumulate(src, sw, grad_out, kr, kc, &mut gk, sh);
    gk
}

#[inline]
fn correlate_adjoint_kernel_accumulate<T: Real>(
    src: &[T],
    sw: usize,
    grad_out: &[T],
    kr: usize,
    kc: usize,
    gk: &mut [T],
    sh: usize,
) {
    let (oh, ow) = (sh + 1 - kr, sw + 1 - kc);
    for i in 0..kr {
        for j in 0..kc {
            let mut acc = T::zero();
            for y in 0..oh {
                let srow = &src[(y + i) * sw + j..(y + i) * sw + j + ow];
                let grow = &grad_out[y * ow..(y + 1) * ow];
                for (s, g) in srow.iter().zip(grow) {
                    acc += *s * *g;
                }
            }
            gk[i * kc + j] += acc;
        }
    }
}

fn check_conv_shapes<T: Real>(
    input: &FeatureMap<T>,
    kernel: &Kernel2D<T>,
    padding: &PaddingSpec,
) -> Result<(usize, usize)> {
    if input.channels() != 1 {
        return Err(Error::shape(format!(
            "conv2d expects a single channel, got {}",
            input.channels()
        )));
    }
    if input.is_empty() {
        return Err(Error::Empty("conv2d"));
    }
    let (ph, pw) = padding.padded_dims(input.height(), input.width());
    if kernel.rows() > ph || kernel.cols() > pw {
        return Err(Error::shape(format!(
            "{}x{} kernel does not fit the {ph}x{pw} padded input",
            kernel.rows(),
            kernel.cols()
        )));
    }
    Ok((ph, pw))
}

/// Single-channel 2D correlation with explicit padding.
pub fn conv2d<T: Real>(
    input: &FeatureMap<T>,
    kernel: &Kernel2D<T>,
    padding: &PaddingSpec,
) -> Result<FeatureMap<T>> {
    let (ph, pw) = check_conv_shapes(input, kernel, padding)?;
    let padded = pad(input.data(), input.height(), input.width(), padding);
    let out = correlate(&padded, ph, pw, kernel);
    FeatureMap::from_plane(ph + 1 - kernel.rows(), pw + 1 - kernel.cols(), out)
}

/// Returns `(d_input, d_kernel)` for an upstream gradient on the output of
/// [`conv2d`].
pub fn conv2d_backward<T: Real>(
    input: &FeatureMap<T>,
    kernel: &Kernel2D<T>,
    padding: &PaddingSpec,
    grad_out: &FeatureMap<T>,
) -> Result<(FeatureMap<T>, Kernel2D<T>)> {
    let (ph, pw) = check_conv_shapes(input, kernel, padding)?;
    let (oh, ow) = (ph + 1 - kernel.rows(), pw + 1 - kernel.cols());
    if grad_out.shape() != (1, oh, ow) {
        return Err(Error::shape(format!(
            "conv2d_backward: upstream {:?}, expected {:?}",
            grad_out.shape(),
            (1, oh, ow)
        )));
    }
    let padded = pad(input.data(), input.height(), input.width(), padding);
    let gk = correlate_adjoint_kernel(
        &padded,
        ph,
        pw,
        grad_out.data(),
        kernel.rows(),
        kernel.cols(),
    );
    let gpad = correlate_adjoint_input(grad_out.data(), ph, pw, kernel);
    let gin = pad_adjoint(&gpad, input.height(), input.width(), padding);
    Ok((
        FeatureMap::from_plane(input.height(), input.width(), gin)?,
        Kernel2D::new(kernel.rows(), kernel.cols(), gk)?,
    ))
}

/// Multi-channel convolution layer: `out[o] = sum_i corr(pad(x[i]), w[o][i]) + bias[o]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T> {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel_rows: usize,
    pub kernel_cols: usize,
    pub padding: PaddingSpec,
    /// `[out][in][row][col]`
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayerGrads<T> {
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> ConvLayerGrads<T> {
    pub fn zeros_like(layer: &ConvLayer<T>) -> Self {
        ConvLayerGrads {
            weights: vec![T::zero(); layer.weights.len()],
            bias: vec![T::zero(); layer.bias.len()],
        }
    }

    pub fn accumulate(&mut self, other: &ConvLayerGrads<T>) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += *b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += *b;
        }
    }
}

impl<T: Real> ConvLayer<T> {
    pub fn zeros(
        out_channels: usize,
        in_channels: usize,
        kernel_rows: usize,
        kernel_cols: usize,
        padding: PaddingSpec,
    ) -> Self {
        ConvLayer {
            out_channels,
            in_channels,
            kernel_rows,
            kernel_cols,
            padding,
            weights: vec![T::zero(); out_channels * in_channels * kernel_rows * kernel_cols],
            bias: vec![T::zero(); out_channels],
        }
    }

    /// He-uniform weights, zero bias.
    pub fn random(
        out_channels: usize,
        in_channels: usize,
        kernel_rows: usize,
        kernel_cols: usize,
        padding: PaddingSpec,
        rng: &mut impl Rng,
    ) -> Self {
        let mut layer = Self::zeros(out_channels, in_channels, kernel_rows, kernel_cols, padding);
        let fan_in = (in_channels * kernel_rows * kernel_cols) as f64;
        let bound = (6.0 / fan_in).sqrt();
        for w in &mut layer.weights {
            *w = T::lit(rng.gen_range(-bound..bound));
        }
        layer
    }

    #[inline]
    fn kernel_len(&self) -> usize {
        self.kernel_rows * self.kernel_cols
    }

    #[inline]
    pub fn kernel(&self, o: usize, i: usize) -> &[T] {
        let n = self.kernel_len();
        let s = (o * self.in_channels + i) * n;
        &self.weights[s..s + n]
    }

    pub fn output_dims(&self, height: usize, width: usize) -> (usize, usize) {
        let (ph, pw) = self.padding.padded_dims(height, width);
        (ph + 1 - self.kernel_rows, pw + 1 - self.kernel_cols)
    }

    fn check_input(&self, x: &FeatureMap<T>) -> Result<(usize, usize)> {
        if x.channels() != self.in_channels {
            return Err(Error::shape(format!(
                "conv layer expects {} input channels, got {}",
                self.in_channels,
                x.channels()
            )));
        }
        let (ph, pw) = self.padding.padded_dims(x.height(), x.width());
        if self.kernel_rows > ph || self.kernel_cols > pw {
            return Err(Error::shape(format!(
                "{}x{} kernel does not fit the {ph}x{pw} padded input",
                self.kernel_rows, self.kernel_cols
            )));
        }
        Ok((ph, pw))
    }

    fn padded_inputs(&self, x: &FeatureMap<T>) -> Vec<Vec<T>> {
        (0..self.in_channels)
            .map(|i| pad(x.channel(i), x.height(), x.width(), &self.padding))
            .collect()
    }

    pub fn forward(&self, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let (_, pw) = self.check_input(x)?;
        let (oh, ow) = self.output_dims(x.height(), x.width());
        let padded = self.padded_inputs(x);
        let mut out = FeatureMap::zeros(self.out_channels, oh, ow);
        for o in 0..self.out_channels {
            let dst = out.channel_mut(o);
            dst.fill(self.bias[o]);
            for (i, src) in padded.iter().enumerate() {
                correlate_accumulate(
                    src,
                    pw,
                    self.kernel(o, i),
                    self.kernel_rows,
                    self.kernel_cols,
                    dst,
                    oh,
                    ow,
                );
            }
        }
        Ok(out)
    }

    /// Returns the input gradient and the parameter gradients.
    pub fn backward(
        &self,
        x: &FeatureMap<T>,
        grad_out: &FeatureMap<T>,
    ) -> Result<(FeatureMap<T>, ConvLayerGrads<T>)> {
        let (ph, pw) = self.check_input(x)?;
        let (oh, ow) = self.output_dims(x.height(), x.width());
        if grad_out.shape() != (self.out_channels, oh, ow) {
            return Err(Error::shape(format!(
                "conv layer backward: upstream {:?}, expected {:?}",
                grad_out.shape(),
                (self.out_channels, oh, ow)
            )));
        }
        let padded = self.padded_inputs(x);
        let mut grads = ConvLayerGrads::zeros_like(self);
        let n = self.kernel_len();
        let mut gpad = vec![vec![T::zero(); ph * pw]; self.in_channels];
        for o in 0..self.out_channels {
            let g = grad_out.channel(o);
            grads.bias[o] = super::sum_ordered(g);
            for i in 0..self.in_channels {
                let s = (o * self.in_channels + i) * n;
                correlate_adjoint_kernel_accumulate(
                    &padded[i],
                    pw,
                    g,
                    self.kernel_rows,
                    self.kernel_cols,
                    &mut grads.weights[s..s + n],
                    ph,
                );
                correlate_adjoint_input_accumulate(
                    g,
                    pw,
                    self.kernel(o, i),
                    self.kernel_rows,
                    self.kernel_cols,
                    &mut gpad[i],
                    ph,
                );
            }
        }
        let mut gin = Vec::with_capacity(x.len());
        for gp in &gpad {
            gin.extend(pad_adjoint(gp, x.height(), x.width(), &self.padding));
        }
        Ok((
            FeatureMap::new(self.in_channels, x.height(), x.width(), gin)?,
            grads,
        ))
    }
}
