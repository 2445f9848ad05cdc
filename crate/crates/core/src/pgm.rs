//! Binary 8-bit PGM (P5) export for masks, images and heatmaps.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{Image, SpatialMask};

/// Raw 8-bit greyscale raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Gray {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Gray {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut fields = Vec::with_capacity(4);
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Format("truncated PGM header".into()));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        if fields[0] != "P5" {
            return Err(Error::Format(format!("not a binary PGM (magic {})", fields[0])));
        }
        let num = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Format(format!("bad PGM header field '{s}'")))
        };
        let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if maxval != 255 {
            return Err(Error::Format(format!("unsupported PGM maxval {maxval}")));
        }
        let body = &bytes[(pos + 1).min(bytes.len())..];
        if body.len() != width * height {
            return Err(Error::Format(format!(
                "PGM payload holds {} bytes, expected {}",
                body.len(),
                width * height
            )));
        }
        Ok(Self {
            width,
            height,
            pixels: body.to_vec(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

pub fn from_mask(mask: &SpatialMask) -> Gray {
    Gray {
        width: mask.width(),
        height: mask.height(),
        pixels: mask.bits().iter().map(|&b| if b { 255 } else { 0 }).collect(),
    }
}

pub fn to_mask(g: &Gray) -> Result<SpatialMask> {
    SpatialMask::from_bits(g.height, g.width, g.pixels.iter().map(|&p| p >= 128).collect())
}

fn quantize(v: f64, lo: f64, hi: f64) -> u8 {
    if !(hi > lo) {
        return 0;
    }
    let u = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
    (u * 255.0).round() as u8
}

/// First channel of `im` mapped linearly from `[lo, hi]` to `[0, 255]`, clamped.
pub fn from_image(im: &Image, lo: f64, hi: f64) -> Gray {
    let s = im.shape();
    Gray {
        width: s.w,
        height: s.h,
        pixels: im.data()[..s.pixels()].iter().map(|&v| quantize(v, lo, hi)).collect(),
    }
}

/// Non-negative grid scaled by its own maximum.
pub fn heatmap(values: &[f64], h: usize, w: usize) -> Result<Gray> {
    if values.len() != h * w {
        return Err(Error::Shape {
            expected: format!("{h}x{w}"),
            got: values.len().to_string(),
        });
    }
    let hi = values.iter().copied().fold(0.0, f64::max);
    Ok(Gray {
        width: w,
        height: h,
        pixels: values.iter().map(|&v| quantize(v, 0.0, hi)).collect(),
    })
}
