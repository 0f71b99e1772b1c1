//! Browser bindings: synthetic frame pairs, flow as a colour-wheel image, and
//! an iteration sweep. Images cross the boundary as RGBA bytes, row-major.
//!
//! Each export wraps a plain function of the same name with a `_rgba` or
//! `_stats` suffix so the logic is testable without a JS host.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use repflow::io::flow_to_rgb;
use repflow::layer::{rep_flow_forward, FlowParams};
use repflow::synth::{shift_circular, texture};
use repflow::{FeatureMap, FlowField, TvParams};
use wasm_bindgen::prelude::*;

/// Largest side the demo accepts, to keep the page responsive.
pub const MAX_SIDE: usize = 256;

fn check_dims(width: usize, height: usize) -> Result<(), String> {
    if width == 0 || height == 0 || width > MAX_SIDE || height > MAX_SIDE {
        return Err(format!(
            "image must be between 1x1 and {MAX_SIDE}x{MAX_SIDE}, got {width}x{height}"
        ));
    }
    Ok(())
}

fn luma(rgba: &[u8], width: usize, height: usize) -> Result<FeatureMap<f32>, String> {
    check_dims(width, height)?;
    if rgba.len() != 4 * width * height {
        return Err(format!(
            "expected {} RGBA bytes, got {}",
            4 * width * height,
            rgba.len()
        ));
    }
    let data = rgba
        .chunks_exact(4)
        .map(|p| 0.299 * p[0] as f32 + 0.587 * p[1] as f32 + 0.114 * p[2] as f32)
        .collect();
    FeatureMap::from_plane(height, width, data).map_err(|e| e.to_string())
}

fn grey_rgba(f: &FeatureMap<f64>) -> Vec<u8> {
    f.data()
        .iter()
        .flat_map(|v| {
            let g = v.round().clamp(0.0, 255.0) as u8;
            [g, g, g, 255]
        })
        .collect()
}

fn solve(
    a: &[u8],
    b: &[u8],
    width: usize,
    height: usize,
    iterations: usize,
    tv: TvParams,
) -> Result<FlowField<f32>, String> {
    let (f1, f2) = (luma(a, width, height)?, luma(b, width, height)?);
    if iterations == 0 || iterations > 1000 {
        return Err(format!("iterations must be in 1..=1000, got {iterations}"));
    }
    tv.validate().map_err(|e| e.to_string())?;
    let params = FlowParams::<f32>::from_tv(&tv);
    rep_flow_forward(&f1, &f2, &params, iterations)
        .map(|(u, _)| u)
        .map_err(|e| e.to_string())
}

/// Two greyscale RGBA frames, the second shifted by `(dx, dy)` circularly,
/// concatenated.
pub fn synthetic_pair_rgba(size: usize, seed: u32, dx: i32, dy: i32) -> Result<Vec<u8>, String> {
    check_dims(size, size)?;
    let f: FeatureMap<f64> = texture(size, size, &mut ChaCha8Rng::seed_from_u64(seed as u64));
    let mut out = grey_rgba(&f);
    out.extend(grey_rgba(&shift_circular(&f, dx as i64, dy as i64)));
    Ok(out)
}

/// Colour-wheel RGBA of the flow from `a` to `b`.
#[allow(clippy::too_many_arguments)]
pub fn compute_flow_rgba(
    a: &[u8],
    b: &[u8],
    width: usize,
    height: usize,
    iterations: usize,
    tau: f64,
    lambda: f64,
    theta: f64,
) -> Result<Vec<u8>, String> {
    let u = solve(
        a,
        b,
        width,
        height,
        iterations,
        TvParams { tau, lambda, theta },
    )?;
    let rgb = flow_to_rgb(&u);
    Ok(rgb
        .data
        .chunks_exact(3)
        .flat_map(|p| [p[0], p[1], p[2], 255])
        .collect())
}

/// Per iteration count: `[iterations, mean u_x, mean u_y, mean endpoint
/// error against the largest count]`, flattened. Margin 2 excludes borders.
pub fn iteration_sweep_stats(
    a: &[u8],
    b: &[u8],
    width: usize,
    height: usize,
    counts: &[u32],
) -> Result<Vec<f64>, String> {
    let max = *counts.iter().max().ok_or("no iteration counts given")? as usize;
    let tv = TvParams::default();
    let reference = solve(a, b, width, height, max, tv)?;
    let mut out = Vec::with_capacity(4 * counts.len());
    for &k in counts {
        let u = solve(a, b, width, height, k as usize, tv)?;
        let (mx, my) = u.interior_mean(2);
        out.extend([
            k as f64,
            mx,
            my,
            u.mean_endpoint_error(&reference)
                .map_err(|e| e.to_string())?,
        ]);
    }
    Ok(out)
}

#[wasm_bindgen]
pub fn synthetic_pair(size: usize, seed: u32, dx: i32, dy: i32) -> Result<Vec<u8>, JsValue> {
    synthetic_pair_rgba(size, seed, dx, dy).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn compute_flow(
    a: &[u8],
    b: &[u8],
    width: usize,
    height: usize,
    iterations: usize,
    tau: f64,
    lambda: f64,
    theta: f64,
) -> Result<Vec<u8>, JsValue> {
    compute_flow_rgba(a, b, width, height, iterations, tau, lambda, theta)
        .map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn iteration_sweep(
    a: &[u8],
    b: &[u8],
    width: usize,
    height: usize,
    counts: &[u32],
) -> Result<Vec<f64>, JsValue> {
    iteration_sweep_stats(a, b, width, height, counts).map_err(|e| JsValue::from_str(&e))
}
