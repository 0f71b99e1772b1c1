//! Middlebury `.flo`: `f32` magic 202021.25, `i32` width, `i32` height, then
//! row-major interleaved `(u, v)` pairs as little-endian `f32`.

use std::path::Path;

use super::atomic_write;
use crate::error::{Error, Result};
use crate::field::FlowField;
use crate::tensor::{FeatureMap, Real};

pub const FLO_MAGIC: f32 = 202021.25;

pub fn flo_bytes<T: Real>(flow: &FlowField<T>) -> Vec<u8> {
    let (h, w) = (flow.height(), flow.width());
    let mut out = Vec::with_capacity(12 + 8 * h * w);
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&(w as i32).to_le_bytes());
    out.extend_from_slice(&(h as i32).to_le_bytes());
    for (u, v) in flow.ux.data().iter().zip(flow.uy.data()) {
        out.extend_from_slice(&(u.as_f64() as f32).to_le_bytes());
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    out
}

fn word(bytes: &[u8], at: usize) -> [u8; 4] {
    bytes[at..at + 4].try_into().expect("4 bytes")
}

pub fn parse_flo(bytes: &[u8]) -> Result<FlowField<f32>> {
    let bad = |reason: String| Error::malformed("flo file", reason);
    if bytes.len() < 12 {
        return Err(bad(format!(
            "{} bytes is shorter than the 12-byte header",
            bytes.len()
        )));
    }
    let magic = f32::from_le_bytes(word(bytes, 0));
    if magic != FLO_MAGIC {
        return Err(bad(format!("magic is {magic}, expected {FLO_MAGIC}")));
    }
    let w = i32::from_le_bytes(word(bytes, 4));
    let h = i32::from_le_bytes(word(bytes, 8));
    if w < 1 || h < 1 {
        return Err(bad(format!("dimensions {w}x{h} must be positive")));
    }
    let (w, h) = (w as usize, h as usize);
    let expected = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add(12))
        .ok_or_else(|| bad("dimensions overflow".into()))?;
    if bytes.len() != expected {
        return Err(bad(format!(
            "{} bytes, expected {expected} for {w}x{h}",
            bytes.len()
        )));
    }
    let mut ux = Vec::with_capacity(w * h);
    let mut uy = Vec::with_capacity(w * h);
    for i in 0..w * h {
        ux.push(f32::from_le_bytes(word(bytes, 12 + 8 * i)));
        uy.push(f32::from_le_bytes(word(bytes, 16 + 8 * i)));
    }
    FlowField::new(
        FeatureMap::from_plane(h, w, ux)?,
        FeatureMap::from_plane(h, w, uy)?,
    )
}

pub fn read_flo(path: &Path) -> Result<FlowField<f32>> {
    parse_flo(&std::fs::read(path)?)
}

pub fn write_flo<T: Real>(path: &Path, flow: &FlowField<T>) -> Result<()> {
    atomic_write(path, &flo_bytes(flow))
}
