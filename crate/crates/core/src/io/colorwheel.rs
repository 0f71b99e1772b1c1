//! Middlebury-style flow colouring: hue encodes direction, saturation encodes
//! magnitude relative to a robust maximum.

use super::pnm::Image;
use crate::field::FlowField;
use crate::tensor::Real;

/// Magnitudes are divided by this percentile of the field's magnitudes.
pub const COLORWHEEL_PERCENTILE: f64 = 99.0;

const SEGMENTS: [(usize, [f64; 3], [f64; 3]); 6] = [
    (15, [255.0, 0.0, 0.0], [255.0, 255.0, 0.0]),
    (6, [255.0, 255.0, 0.0], [0.0, 255.0, 0.0]),
    (4, [0.0, 255.0, 0.0], [0.0, 255.0, 255.0]),
    (11, [0.0, 255.0, 255.0], [0.0, 0.0, 255.0]),
    (13, [0.0, 0.0, 255.0], [255.0, 0.0, 255.0]),
    (6, [255.0, 0.0, 255.0], [255.0, 0.0, 0.0]),
];

fn wheel() -> Vec<[f64; 3]> {
    let mut out = Vec::with_capacity(55);
    for (n, a, b) in SEGMENTS {
        for i in 0..n {
            let t = i as f64 / n as f64;
            out.push([0, 1, 2].map(|c| a[c] + (b[c] - a[c]) * t));
        }
    }
    out
}

/// Nearest-rank percentile of per-pixel flow magnitude; 0 for an empty field.
pub fn magnitude_percentile<T: Real>(flow: &FlowField<T>, pct: f64) -> f64 {
    let mut mags: Vec<f64> = flow
        .ux
        .data()
        .iter()
        .zip(flow.uy.data())
        .map(|(u, v)| u.as_f64().hypot(v.as_f64()))
        .filter(|m| m.is_finite())
        .collect();
    if mags.is_empty() {
        return 0.0;
    }
    mags.sort_by(f64::total_cmp);
    let rank = ((pct / 100.0) * mags.len() as f64).ceil() as usize;
    mags[rank.clamp(1, mags.len()) - 1]
}

/// RGB rendering of `flow`. Zero flow is white; pixels beyond the
/// normalising magnitude are darkened.
pub fn flow_to_rgb<T: Real>(flow: &FlowField<T>) -> Image {
    let colors = wheel();
    let ncols = colors.len();
    let scale = magnitude_percentile(flow, COLORWHEEL_PERCENTILE);
    let mut data = Vec::with_capacity(3 * flow.height() * flow.width());
    for (u, v) in flow.ux.data().iter().zip(flow.uy.data()) {
        let (u, v) = (u.as_f64(), v.as_f64());
        if scale <= 0.0 || !u.is_finite() || !v.is_finite() {
            data.extend_from_slice(&[255, 255, 255]);
            continue;
        }
        let (u, v) = (u / scale, v / scale);
        let rad = u.hypot(v);
        let angle = (-v).atan2(-u) / std::f64::consts::PI;
        let fk = (angle + 1.0) / 2.0 * (ncols - 1) as f64;
        let k0 = (fk.floor() as usize).min(ncols - 1);
        let k1 = (k0 + 1) % ncols;
        let f = fk - k0 as f64;
        for (c0, c1) in colors[k0].iter().zip(&colors[k1]) {
            let col = ((1.0 - f) * c0 + f * c1) / 255.0;
            let col = if rad <= 1.0 {
                1.0 - rad * (1.0 - col)
            } else {
                col * 0.75
            };
            data.push((255.0 * col).floor().clamp(0.0, 255.0) as u8);
        }
    }
    Image::new(flow.width(), flow.height(), 3, data).expect("rgb sized from flow")
}
