//! Synthetic periodic textures and circular shifts, used by the toy dataset,
//! the gradient checks, benchmarks and the browser demo.

use std::f64::consts::TAU;

use rand::Rng;

use crate::tensor::{FeatureMap, Real};

/// Number of sinusoids summed by [`texture`].
pub const TEXTURE_COMPONENTS: usize = 6;

/// Band-limited periodic texture in `[0, 255]`: a sum of sinusoids whose
/// frequencies are integer multiples of the fundamental, so circular shifts
/// are exact on the torus.
pub fn texture<T: Real>(height: usize, width: usize, rng: &mut impl Rng) -> FeatureMap<T> {
    let comps: Vec<(f64, f64, f64, f64)> = (0..TEXTURE_COMPONENTS)
        .map(|_| {
            let mut kx = rng.gen_range(-3i32..=3);
            let ky = rng.gen_range(-3i32..=3);
            if kx == 0 && ky == 0 {
                kx = 1;
            }
            (
                kx as f64,
                ky as f64,
                rng.gen_range(0.0..TAU),
                rng.gen_range(0.5..1.0),
            )
        })
        .collect();
    let raw: Vec<f64> = (0..height * width)
        .map(|i| {
            let (y, x) = ((i / width) as f64, (i % width) as f64);
            comps
                .iter()
                .map(|&(kx, ky, ph, a)| {
                    a * (TAU * (kx * x / width as f64 + ky * y / height as f64) + ph).sin()
                })
                .sum()
        })
        .collect();
    let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    let data = raw
        .iter()
        .map(|&v| T::lit(255.0 * (v - lo) / span))
        .collect();
    FeatureMap::new(1, height, width, data).expect("length matches")
}

/// `out(y, x) = f(y - dy, x - dx)` with wrap-around: content moves by
/// `(dx, dy)`.
pub fn shift_circular<T: Real>(f: &FeatureMap<T>, dx: i64, dy: i64) -> FeatureMap<T> {
    let (h, w) = (f.height() as i64, f.width() as i64);
    FeatureMap::from_fn(f.channels(), f.height(), f.width(), |c, y, x| {
        let sy = (y as i64 - dy).rem_euclid(h) as usize;
        let sx = (x as i64 - dx).rem_euclid(w) as usize;
        f.get(c, sy, sx)
    })
}
