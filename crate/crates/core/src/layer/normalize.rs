use crate::error::{Error, Result};
use crate::tensor::{FeatureMap, Real};

pub const NORMALIZED_MAX: f64 = 255.0;

/// Per-channel statistics recorded by [`normalize_255`].
#[derive(Clone, Debug)]
pub struct NormalizeTape<T> {
    pub input: FeatureMap<T>,
    /// first row-major index of the minimum / maximum of each channel
    pub argmin: Vec<usize>,
    pub argmax: Vec<usize>,
    /// `max - min + eps`; `None` for constant channels
    pub range: Vec<Option<T>>,
}

/// Maps each channel affinely onto `[0, 255]`:
/// `x -> 255 * (x - min) / (max - min + eps)`. Constant channels become zero.
pub fn normalize_255<T: Real>(f: &FeatureMap<T>) -> Result<(FeatureMap<T>, NormalizeTape<T>)> {
    if f.is_empty() {
        return Err(Error::Empty("normalize_255"));
    }
    f.ensure_finite("normalization input")?;
    let scale = T::lit(NORMALIZED_MAX);
    let mut out = FeatureMap::zeros(f.channels(), f.height(), f.width());
    let mut argmin = Vec::with_capacity(f.channels());
    let mut argmax = Vec::with_capacity(f.channels());
    let mut range = Vec::with_capacity(f.channels());
    for c in 0..f.channels() {
        let x = f.channel(c);
        let (mut lo, mut hi) = (0usize, 0usize);
        for (i, &v) in x.iter().enumerate() {
            if v < x[lo] {
                lo = i;
            }
            if v > x[hi] {
                hi = i;
            }
        }
        let (min, max) = (x[lo], x[hi]);
        argmin.push(lo);
        argmax.push(hi);
        if max == min {
            range.push(None);
            continue;
        }
        let r = max - min + T::DIV_EPS;
        range.push(Some(r));
        for (o, &v) in out.channel_mut(c).iter_mut().zip(x) {
            *o = scale * (v - min) / r;
        }
    }
    Ok((
        out,
        NormalizeTape {
            input: f.clone(),
            argmin,
            argmax,
            range,
        },
    ))
}

/// Gradient through [`normalize_255`]. The min/max subgradient is routed to
/// the recorded extremal elements; constant channels get zero gradient.
pub fn normalize_255_backward<T: Real>(
    tape: &NormalizeTape<T>,
    grad_out: &FeatureMap<T>,
) -> Result<FeatureMap<T>> {
    tape.input
        .ensure_same_shape(grad_out, "normalize backward")?;
    let scale = T::lit(NORMALIZED_MAX);
    let mut gin = FeatureMap::zeros(grad_out.channels(), grad_out.height(), grad_out.width());
    for c in 0..grad_out.channels() {
        let Some(r) = tape.range[c] else { continue };
        let x = tape.input.channel(c);
        let g = grad_out.channel(c);
        let min = x[tape.argmin[c]];
        let mut g_min = T::zero();
        let mut g_max = T::zero();
        let dst = gin.channel_mut(c);
        for i in 0..x.len() {
            let t = (x[i] - min) / r;
            dst[i] = scale * g[i] / r;
            g_min += g[i] * scale * (t - T::one()) / r;
            g_max -= g[i] * scale * t / r;
        }
        dst[tape.argmin[c]] += g_min;
        dst[tape.argmax[c]] += g_max;
    }
    Ok(gin)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spans_zero_to_255() {
        let f = FeatureMap::<f64>::new(1, 1, 3, vec![-0.5, 0.1, 0.5]).unwrap();
        let (n, _) = normalize_255(&f).unwrap();
        assert_eq!(n.data()[0], 0.0);
        assert!((n.data()[2] - 255.0).abs() < 1e-9);
    }

    #[test]
    fn constant_channel_is_zero_with_zero_gradient() {
        let f = FeatureMap::<f64>::filled(2, 3, 3, 4.2);
        let (n, tape) = normalize_255(&f).unwrap();
        assert!(n.data().iter().all(|&v| v == 0.0));
        let g = normalize_255_backward(&tape, &FeatureMap::filled(2, 3, 3, 1.0)).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn already_scaled_is_near_fixed_point() {
        let f = FeatureMap::<f64>::new(1, 1, 3, vec![0.0, 127.5, 255.0]).unwrap();
        let (n, _) = normalize_255(&f).unwrap();
        for (a, b) in n.data().iter().zip(f.data()) {
            // 255 * x / (255 + 1e-12)
            assert!((a - b).abs() < 1e-11);
        }
    }

    #[test]
    fn per_channel() {
        let f = FeatureMap::<f64>::new(2, 1, 2, vec![0.0, 1.0, 10.0, 30.0]).unwrap();
        let (n, _) = normalize_255(&f).unwrap();
        assert!((n.data()[1] - 255.0).abs() < 1e-9);
        assert!((n.data()[3] - 255.0).abs() < 1e-9);
        assert_eq!(n.data()[2], 0.0);
    }

    #[test]
    fn ties_route_to_first_extremum() {
        let f = FeatureMap::<f64>::new(1, 1, 4, vec![1.0, 3.0, 1.0, 3.0]).unwrap();
        let (_, tape) = normalize_255(&f).unwrap();
        assert_eq!(tape.argmin, vec![0]);
        assert_eq!(tape.argmax, vec![1]);
    }

    #[test]
    fn backward_matches_central_differences() {
        let f = FeatureMap::<f64>::from_fn(2, 3, 4, |c, y, x| {
            ((c * 12 + y * 4 + x) as f64 * 1.3).sin()
        });
        let weights =
            FeatureMap::<f64>::from_fn(2, 3, 4, |c, y, x| ((c + y * x) as f64 * 0.7).cos());
        let loss = |f: &FeatureMap<f64>| normalize_255(f).unwrap().0.dot(&weights).unwrap();
        let (_, tape) = normalize_255(&f).unwrap();
        let g = normalize_255_backward(&tape, &weights).unwrap();
        let h = 1e-6;
        for i in 0..f.len() {
            let mut p = f.clone();
            p.data_mut()[i] += h;
            let mut m = f.clone();
            m.data_mut()[i] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            assert!(
                (fd - g.data()[i]).abs() < 1e-5 * (1.0 + fd.abs()),
                "{i}: {fd} vs {}",
                g.data()[i]
            );
        }
    }
}
