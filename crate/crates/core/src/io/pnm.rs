//! Binary PGM (`P5`) and PPM (`P6`) with 8-bit samples.

use std::path::Path;

use super::atomic_write;
use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

/// Interleaved 8-bit image with 1 (grey) or 3 (RGB) channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::invalid(format!(
                "image channels must be 1 or 3, got {channels}"
            )));
        }
        if width == 0 || height == 0 {
            return Err(Error::Empty("Image::new"));
        }
        if data.len() != width * height * channels {
            return Err(Error::shape(format!(
                "{} bytes for a {width}x{height}x{channels} image",
                data.len()
            )));
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
    }

    /// Single-plane intensity in `[0, 255]`; RGB uses Rec. 601 luma weights.
    pub fn luma(&self) -> FeatureMap<f64> {
        let n = self.width * self.height;
        let data = if self.channels == 1 {
            self.data.iter().map(|&v| v as f64).collect()
        } else {
            (0..n)
                .map(|i| {
                    let p = &self.data[3 * i..3 * i + 3];
                    0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64
                })
                .collect()
        };
        FeatureMap::from_plane(self.height, self.width, data).expect("plane sized from image")
    }

    /// One `[0, 255]` plane per colour channel.
    pub fn planes(&self) -> FeatureMap<f64> {
        let (c, n) = (self.channels, self.width * self.height);
        let mut data = vec![0.0; c * n];
        for (i, &v) in self.data.iter().enumerate() {
            data[(i % c) * n + i / c] = v as f64;
        }
        FeatureMap::new(c, self.height, self.width, data).expect("planes sized from image")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::malformed("pnm header", format!("missing or invalid {what}")))
    }
}

pub fn parse_pnm(bytes: &[u8]) -> Result<Image> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(Error::malformed("pnm header", "expected magic P5 or P6")),
    };
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::malformed(
            "pnm header",
            format!("dimensions {width}x{height}"),
        ));
    }
    if maxval == 0 || maxval > 255 {
        return Err(Error::malformed(
            "pnm header",
            format!("maxval {maxval} is not an 8-bit depth"),
        ));
    }
    if !bytes.get(h.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::malformed(
            "pnm header",
            "no whitespace before pixel data",
        ));
    }
    let body = &bytes[h.pos + 1..];
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| Error::malformed("pnm header", "dimensions overflow"))?;
    if body.len() < need {
        return Err(Error::malformed(
            "pnm body",
            format!("{} bytes, expected {need}", body.len()),
        ));
    }
    let data = if maxval == 255 {
        body[..need].to_vec()
    } else {
        body[..need]
            .iter()
            .map(|&v| ((v as usize * 255 + maxval / 2) / maxval).min(255) as u8)
            .collect()
    };
    Image::new(width, height, channels, data)
}

pub fn read_pnm(path: &Path) -> Result<Image> {
    parse_pnm(&std::fs::read(path)?)
}

pub fn write_pnm(path: &Path, image: &Image) -> Result<()> {
    atomic_write(path, &image.to_bytes())
}
