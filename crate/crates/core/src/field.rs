use crate::error::{Error, Result};
use crate::tensor::{FeatureMap, Real};

/// Per-pixel displacement `(u_x, u_y)`; both planes share the input size.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField<T> {
    pub ux: FeatureMap<T>,
    pub uy: FeatureMap<T>,
}

impl<T: Real> FlowField<T> {
    pub fn zeros(height: usize, width: usize) -> Self {
        FlowField {
            ux: FeatureMap::zeros(1, height, width),
            uy: FeatureMap::zeros(1, height, width),
        }
    }

    pub fn new(ux: FeatureMap<T>, uy: FeatureMap<T>) -> Result<Self> {
        if ux.channels() != 1 || uy.channels() != 1 {
            return Err(Error::shape("flow components must be single-channel"));
        }
        ux.ensure_same_shape(&uy, "flow components")?;
        Ok(FlowField { ux, uy })
    }

    pub fn height(&self) -> usize {
        self.ux.height()
    }

    pub fn width(&self) -> usize {
        self.ux.width()
    }

    pub fn is_finite(&self) -> bool {
        self.ux.is_finite() && self.uy.is_finite()
    }

    pub fn is_zero(&self) -> bool {
        self.ux
            .data()
            .iter()
            .chain(self.uy.data())
            .all(|v| *v == T::zero())
    }

    pub fn cast<U: Real>(&self) -> FlowField<U> {
        FlowField {
            ux: self.ux.cast(),
            uy: self.uy.cast(),
        }
    }

    /// Mean `(u_x, u_y)` over pixels at least `margin` away from every edge.
    pub fn interior_mean(&self, margin: usize) -> (f64, f64) {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
        self.for_interior(margin, |x, y| {
            sx += x;
            sy += y;
            n += 1;
        });
        (sx / n.max(1) as f64, sy / n.max(1) as f64)
    }

    /// Mean per-pixel `|u_y|` and `|(u_x, u_y)|` over the interior.
    pub fn interior_abs_means(&self, margin: usize) -> (f64, f64, f64) {
        let (mut ax, mut ay, mut mag, mut n) = (0.0, 0.0, 0.0, 0usize);
        self.for_interior(margin, |x, y| {
            ax += x.abs();
            ay += y.abs();
            mag += x.hypot(y);
            n += 1;
        });
        let n = n.max(1) as f64;
        (ax / n, ay / n, mag / n)
    }

    fn for_interior(&self, margin: usize, mut f: impl FnMut(f64, f64)) {
        let (h, w) = (self.height(), self.width());
        for y in margin..h.saturating_sub(margin) {
            for x in margin..w.saturating_sub(margin) {
                f(self.ux.get(0, y, x).as_f64(), self.uy.get(0, y, x).as_f64());
            }
        }
    }

    /// Mean Euclidean distance between the two fields' vectors.
    pub fn mean_endpoint_error(&self, other: &FlowField<T>) -> Result<f64> {
        self.ux.ensure_same_shape(&other.ux, "endpoint error")?;
        let n = self.ux.len();
        let mut acc = 0.0;
        for i in 0..n {
            let dx = (self.ux.data()[i] - other.ux.data()[i]).as_f64();
            let dy = (self.uy.data()[i] - other.uy.data()[i]).as_f64();
            acc += dx.hypot(dy);
        }
        Ok(acc / n as f64)
    }

    /// `max|a - b| / max|other|` over both components; 0 when the fields are
    /// identical.
    pub fn relative_error(&self, other: &FlowField<T>) -> f64 {
        let a = self.ux.data().iter().chain(self.uy.data());
        let b = other.ux.data().iter().chain(other.uy.data());
        let (mut diff, mut scale) = (0.0f64, 0.0f64);
        for (a, b) in a.zip(b) {
            diff = diff.max((a.as_f64() - b.as_f64()).abs());
            scale = scale.max(b.as_f64().abs());
        }
        if diff == 0.0 {
            0.0
        } else {
            diff / scale.max(f64::MIN_POSITIVE)
        }
    }

    /// Largest `|a - b| / max(|a|, |b|, floor)` over both components.
    pub fn max_relative_diff(&self, other: &FlowField<T>, floor: f64) -> f64 {
        let pairs = self
            .ux
            .data()
            .iter()
            .zip(other.ux.data())
            .chain(self.uy.data().iter().zip(other.uy.data()));
        pairs
            .map(|(a, b)| {
                let (a, b) = (a.as_f64(), b.as_f64());
                (a - b).abs() / a.abs().max(b.abs()).max(floor)
            })
            .fold(0.0, f64::max)
    }
}

/// Dual state of the TV term. `px` holds the two channels dual to the
/// gradient of `u_x` (x then y derivative); `py` likewise for `u_y`.
#[derive(Clone, Debug, PartialEq)]
pub struct DualField<T> {
    pub px: FeatureMap<T>,
    pub py: FeatureMap<T>,
}

impl<T: Real> DualField<T> {
    pub fn zeros(height: usize, width: usize) -> Self {
        DualField {
            px: FeatureMap::zeros(2, height, width),
            py: FeatureMap::zeros(2, height, width),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.px
            .data()
            .iter()
            .chain(self.py.data())
            .all(|v| *v == T::zero())
    }
}
