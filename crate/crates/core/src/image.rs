//! Dense image and spatial mask containers.
//!
//! Images are stored row-major as (channel, row, column), the same order the
//! trace format uses on disk.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w }
    }

    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pixels(&self) -> usize {
        self.h * self.w
    }

    pub fn index(&self, c: usize, row: usize, col: usize) -> usize {
        (c * self.h + row) * self.w + col
    }

    pub(crate) fn check(&self, other: &Shape) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::Shape {
                expected: self.to_string(),
                got: other.to_string(),
            })
        }
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.c, self.h, self.w)
    }
}

/// A c×h×w real-valued array. Also used for score and noise fields.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    shape: Shape,
    data: Vec<f64>,
}

/// Per-pixel score components, shaped like the image they were evaluated at.
pub type ScoreField = Image;

impl Image {
    pub fn zeros(shape: Shape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::Shape {
                expected: format!("{shape} ({} values)", shape.len()),
                got: format!("{} values", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, c: usize, row: usize, col: usize) -> f64 {
        self.data[self.shape.index(c, row, col)]
    }

    pub fn set(&mut self, c: usize, row: usize, col: usize, value: f64) {
        let i = self.shape.index(c, row, col);
        self.data[i] = value;
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination of two equally shaped images.
    pub fn zip_map(&self, other: &Image, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.shape.check(&other.shape)?;
        Ok(Self {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn scale(&self, k: f64) -> Self {
        self.map(|v| v * k)
    }

    /// Every value rounded to the nearest f32, as stored in trace files.
    pub fn round_f32(&self) -> Self {
        self.map(|v| v as f32 as f64)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sq_dist(&self, other: &Image) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    /// Copies `src` into `self` at every pixel where `mask` is set, across all channels.
    pub fn splice(&mut self, src: &Image, mask: &SpatialMask) -> Result<()> {
        self.shape.check(&src.shape)?;
        mask.check_spatial(self.shape)?;
        let px = self.shape.pixels();
        for c in 0..self.shape.c {
            for p in mask.indices() {
                self.data[c * px + p] = src.data[c * px + p];
            }
        }
        Ok(())
    }
}

/// Axis-aligned rectangle over the spatial grid; `row1`/`col1` are exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub row0: usize,
    pub col0: usize,
    pub row1: usize,
    pub col1: usize,
}

impl Rect {
    pub fn new(row0: usize, col0: usize, row1: usize, col1: usize) -> Self {
        Self {
            row0,
            col0,
            row1,
            col1,
        }
    }

    pub fn area(&self) -> usize {
        self.row1.saturating_sub(self.row0) * self.col1.saturating_sub(self.col0)
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.row0..self.row1).contains(&row) && (self.col0..self.col1).contains(&col)
    }

    pub fn fits(&self, h: usize, w: usize) -> bool {
        self.row0 < self.row1 && self.col0 < self.col1 && self.row1 <= h && self.col1 <= w
    }
}

/// Boolean grid over the h×w image domain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpatialMask {
    h: usize,
    w: usize,
    bits: Vec<bool>,
}

impl SpatialMask {
    pub fn empty(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            bits: vec![false; h * w],
        }
    }

    pub fn from_rect(h: usize, w: usize, rect: &Rect) -> Self {
        let mut m = Self::empty(h, w);
        for r in rect.row0..rect.row1.min(h) {
            for c in rect.col0..rect.col1.min(w) {
                m.bits[r * w + c] = true;
            }
        }
        m
    }

    pub fn from_bits(h: usize, w: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != h * w {
            return Err(Error::Shape {
                expected: format!("{h}x{w}"),
                got: format!("{} cells", bits.len()),
            });
        }
        Ok(Self { h, w, bits })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.w + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: bool) {
        self.bits[row * self.w + col] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Flat pixel indices (row * w + col) of set cells.
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
    }

    pub fn union_with(&mut self, other: &SpatialMask) {
        for (a, &b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= b;
        }
    }

    pub fn complement(&self) -> Self {
        Self {
            h: self.h,
            w: self.w,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    /// Square (Chebyshev) dilation.
    pub fn dilate(&self, radius: usize) -> Self {
        if radius == 0 {
            return self.clone();
        }
        let mut out = Self::empty(self.h, self.w);
        for r in 0..self.h {
            for c in 0..self.w {
                if !self.get(r, c) {
                    continue;
                }
                for rr in r.saturating_sub(radius)..=(r + radius).min(self.h - 1) {
                    for cc in c.saturating_sub(radius)..=(c + radius).min(self.w - 1) {
                        out.set(rr, cc, true);
                    }
                }
            }
        }
        out
    }

    pub(crate) fn check_spatial(&self, shape: Shape) -> Result<()> {
        if self.h == shape.h && self.w == shape.w {
            Ok(())
        } else {
            Err(Error::Shape {
                expected: format!("{}x{}", shape.h, shape.w),
                got: format!("{}x{}", self.h, self.w),
            })
        }
    }
}
