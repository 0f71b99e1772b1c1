//! Dense `(channel, row, column)` tensors and the handful of operations the
//! solver, the flow layer and the toy classifier are built from.

mod conv;
mod real;

pub use conv::{
    conv2d, conv2d_backward, correlate, correlate_adjoint_input, correlate_adjoint_kernel, pad,
    pad_adjoint, ConvLayer, ConvLayerGrads,
};
pub use real::Real;

use crate::error::{Error, Result};

/// Rank-3 tensor stored row-major as `(channel, row, column)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::shape(format!(
                "{} values cannot fill a {channels}x{height}x{width} feature map",
                data.len()
            )));
        }
        Ok(FeatureMap {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        FeatureMap {
            channels,
            height,
            width,
            data: vec![T::zero(); channels * height * width],
        }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: T) -> Self {
        FeatureMap {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    /// Builds a map by evaluating `f(channel, row, column)` in storage order.
    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        FeatureMap {
            channels,
            height,
            width,
            data,
        }
    }

    /// Single-channel map from a row-major plane.
    pub fn from_plane(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        Self::new(1, height, width, data)
    }

    /// Concatenates maps along the channel axis.
    pub fn stack(maps: &[FeatureMap<T>]) -> Result<Self> {
        let first = maps.first().ok_or(Error::Empty("stack"))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::new();
        let mut channels = 0;
        for m in maps {
            if m.height != h || m.width != w {
                return Err(Error::shape(format!(
                    "cannot stack {}x{} with {h}x{w}",
                    m.height, m.width
                )));
            }
            channels += m.channels;
            data.extend_from_slice(&m.data);
        }
        Ok(FeatureMap {
            channels,
            height: h,
            width: w,
            data,
        })
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: T) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Copies one channel out as a single-channel map.
    pub fn plane(&self, c: usize) -> FeatureMap<T> {
        FeatureMap {
            channels: 1,
            height: self.height,
            width: self.width,
            data: self.channel(c).to_vec(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    pub fn same_shape(&self, other: &FeatureMap<T>) -> bool {
        self.shape() == other.shape()
    }

    pub fn ensure_same_shape(&self, other: &FeatureMap<T>, context: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::shape(format!(
                "{context}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )))
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> FeatureMap<T> {
        FeatureMap {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> FeatureMap<U> {
        FeatureMap {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn add(&self, other: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        elementwise(ElementwiseOp::Add, self, Operand::Tensor(other))
    }

    pub fn sub(&self, other: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        elementwise(ElementwiseOp::Sub, self, Operand::Tensor(other))
    }

    pub fn mul(&self, other: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        elementwise(ElementwiseOp::Mul, self, Operand::Tensor(other))
    }

    pub fn scale(&self, s: T) -> FeatureMap<T> {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> T {
        sum_ordered(&self.data)
    }

    /// Sum of elementwise products, accumulated in storage order.
    pub fn dot(&self, other: &FeatureMap<T>) -> Result<T> {
        self.ensure_same_shape(other, "dot")?;
        let mut acc = T::zero();
        for (a, b) in self.data.iter().zip(&other.data) {
            acc += *a * *b;
        }
        Ok(acc)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }
}

/// Row-major single-channel kernel, applied by correlation (no flip).
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel2D<T> {
    rows: usize,
    cols: usize,
    weights: Vec<T>,
}

impl<T: Real> Kernel2D<T> {
    pub fn new(rows: usize, cols: usize, weights: Vec<T>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid(format!(
                "kernel must be at least 1x1, got {rows}x{cols}"
            )));
        }
        if weights.len() != rows * cols {
            return Err(Error::shape(format!(
                "{} weights for a {rows}x{cols} kernel",
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("kernel weights".into()));
        }
        Ok(Kernel2D {
            rows,
            cols,
            weights,
        })
    }

    pub fn from_f64(rows: usize, cols: usize, weights: &[f64]) -> Result<Self> {
        Self::new(rows, cols, weights.iter().map(|&w| T::lit(w)).collect())
    }

    pub fn identity() -> Self {
        Kernel2D {
            rows: 1,
            cols: 1,
            weights: vec![T::one()],
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Kernel2D {
            rows,
            cols,
            weights: vec![T::zero(); rows * cols],
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> T {
        self.weights[r * self.cols + c]
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [T] {
        &mut self.weights
    }

    pub fn cast<U: Real>(&self) -> Kernel2D<U> {
        Kernel2D {
            rows: self.rows,
            cols: self.cols,
            weights: self.weights.iter().map(|w| U::lit(w.as_f64())).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    Replicate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PaddingSpec {
    pub mode: PadMode,
    pub left: usize,
    pub right: usize,
    pub top: usize,
    pub bottom: usize,
}

impl PaddingSpec {
    pub const NONE: PaddingSpec = PaddingSpec {
        mode: PadMode::Zero,
        left: 0,
        right: 0,
        top: 0,
        bottom: 0,
    };

    pub fn zero(left: usize, right: usize, top: usize, bottom: usize) -> Self {
        PaddingSpec {
            mode: PadMode::Zero,
            left,
            right,
            top,
            bottom,
        }
    }

    pub fn replicate(n: usize) -> Self {
        PaddingSpec {
            mode: PadMode::Replicate,
            left: n,
            right: n,
            top: n,
            bottom: n,
        }
    }

    pub fn zeros_around(n: usize) -> Self {
        Self::zero(n, n, n, n)
    }

    #[inline]
    pub fn padded_dims(&self, height: usize, width: usize) -> (usize, usize) {
        (
            height + self.top + self.bottom,
            width + self.left + self.right,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ElementwiseOp<T> {
    Add,
    Sub,
    Mul,
    /// `a / (b + eps)`; `b` is expected non-negative.
    DivGuarded,
    Scale,
    ClampMin(T),
    ClampMax(T),
}

pub enum Operand<'a, T> {
    Tensor(&'a FeatureMap<T>),
    Scalar(T),
}

pub fn elementwise<T: Real>(
    op: ElementwiseOp<T>,
    a: &FeatureMap<T>,
    b: Operand<'_, T>,
) -> Result<FeatureMap<T>> {
    let apply = |x: T, y: T| -> T {
        match op {
            ElementwiseOp::Add => x + y,
            ElementwiseOp::Sub => x - y,
            ElementwiseOp::Mul | ElementwiseOp::Scale => x * y,
            ElementwiseOp::DivGuarded => x / (y + T::DIV_EPS),
            ElementwiseOp::ClampMin(lo) => x.max(lo),
            ElementwiseOp::ClampMax(hi) => x.min(hi),
        }
    };
    let data = match b {
        Operand::Tensor(b) => {
            a.ensure_same_shape(b, "elementwise")?;
            a.data
                .iter()
                .zip(&b.data)
                .map(|(&x, &y)| apply(x, y))
                .collect()
        }
        Operand::Scalar(s) => a.data.iter().map(|&x| apply(x, s)).collect(),
    };
    Ok(FeatureMap {
        channels: a.channels,
        height: a.height,
        width: a.width,
        data,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Min,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceScope {
    Whole,
    PerChannel,
}

/// Reduces in storage order. `Whole` yields one value, `PerChannel` one per
/// channel.
pub fn reduce<T: Real>(op: ReduceOp, x: &FeatureMap<T>, scope: ReduceScope) -> Result<Vec<T>> {
    if x.is_empty() {
        return Err(Error::Empty("reduce"));
    }
    let run = |s: &[T]| -> T {
        match op {
            ReduceOp::Sum => sum_ordered(s),
            ReduceOp::Mean => sum_ordered(s) / T::lit(s.len() as f64),
            ReduceOp::Min => s.iter().copied().fold(T::infinity(), T::min),
            ReduceOp::Max => s.iter().copied().fold(T::neg_infinity(), T::max),
        }
    };
    Ok(match scope {
        ReduceScope::Whole => vec![run(&x.data)],
        ReduceScope::PerChannel => (0..x.channels).map(|c| run(x.channel(c))).collect(),
    })
}

/// Plain left-to-right accumulation; `Iterator::sum` gives the same order but
/// this keeps it explicit.
#[inline]
pub fn sum_ordered<T: Real>(s: &[T]) -> T {
    let mut acc = T::zero();
    for &v in s {
        acc += v;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_length() {
        assert!(FeatureMap::<f64>::new(1, 2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn elementwise_examples() {
        let x = FeatureMap::<f64>::from_fn(2, 3, 4, |c, y, x| (c * 12 + y * 4 + x) as f64 - 5.0);
        let zero = FeatureMap::zeros(2, 3, 4);
        assert_eq!(x.add(&zero).unwrap(), x);
        assert_eq!(
            elementwise(ElementwiseOp::Scale, &x, Operand::Scalar(1.0)).unwrap(),
            x
        );

        let a = FeatureMap::<f64>::new(1, 1, 2, vec![2.0, 4.0]).unwrap();
        let b = FeatureMap::<f64>::new(1, 1, 2, vec![1.0, 1.0]).unwrap();
        assert_eq!(a.sub(&b).unwrap().data(), &[1.0, 3.0]);
    }

    #[test]
    fn elementwise_shape_mismatch() {
        let a = FeatureMap::<f32>::zeros(1, 2, 2);
        let b = FeatureMap::<f32>::zeros(1, 2, 3);
        assert!(matches!(a.add(&b), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn div_guarded_survives_zero_denominator() {
        let a = FeatureMap::<f64>::filled(1, 1, 3, 2.0);
        let b = FeatureMap::<f64>::zeros(1, 1, 3);
        let q = elementwise(ElementwiseOp::DivGuarded, &a, Operand::Tensor(&b)).unwrap();
        assert!(q.is_finite());
        assert_eq!(q.data()[0], 2.0 / 1e-12);
    }

    #[test]
    fn clamps() {
        let a = FeatureMap::<f64>::new(1, 1, 3, vec![-2.0, 0.5, 3.0]).unwrap();
        let lo = elementwise(ElementwiseOp::ClampMin(0.0), &a, Operand::Scalar(0.0)).unwrap();
        assert_eq!(lo.data(), &[0.0, 0.5, 3.0]);
        let hi = elementwise(ElementwiseOp::ClampMax(1.0), &a, Operand::Scalar(0.0)).unwrap();
        assert_eq!(hi.data(), &[-2.0, 0.5, 1.0]);
    }

    #[test]
    fn reduce_examples() {
        let z = FeatureMap::<f64>::zeros(2, 3, 3);
        assert_eq!(
            reduce(ReduceOp::Sum, &z, ReduceScope::Whole).unwrap(),
            vec![0.0]
        );

        let ch = FeatureMap::<f64>::new(2, 1, 2, vec![-0.5, 0.5, 7.0, 9.0]).unwrap();
        let max = reduce(ReduceOp::Max, &ch, ReduceScope::PerChannel).unwrap();
        assert_eq!(max[0], 0.5);
        assert_eq!(max[1], 9.0);

        let m = FeatureMap::<f64>::new(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(
            reduce(ReduceOp::Mean, &m, ReduceScope::Whole).unwrap(),
            vec![2.5]
        );
        assert_eq!(
            reduce(ReduceOp::Min, &m, ReduceScope::Whole).unwrap(),
            vec![1.0]
        );
    }

    #[test]
    fn reduce_empty_rejected() {
        let e = FeatureMap::<f64>::zeros(0, 3, 3);
        assert!(matches!(
            reduce(ReduceOp::Sum, &e, ReduceScope::Whole),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn kernel_validation() {
        assert!(Kernel2D::<f64>::new(0, 1, vec![]).is_err());
        assert!(Kernel2D::<f64>::new(1, 2, vec![1.0]).is_err());
        assert!(Kernel2D::<f64>::new(1, 1, vec![f64::NAN]).is_err());
    }
}
