//! Binary masks and single-channel label maps.

use std::fmt;

use crate::error::{Error, Result};

/// A binary H×W mask stored row-major, one byte per pixel (0 or 1).
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl fmt::Debug for Mask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Mask({}x{}, {} set)",
            self.height,
            self.width,
            self.count()
        )
    }
}

impl Mask {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![1; height * width],
        }
    }

    /// Builds a mask from raw 0/1 values. Any other value is rejected.
    pub fn from_vec(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "mask buffer has {} values, expected {height}x{width}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::InvalidInput(format!("mask value {v} is not binary")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c) as u8);
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col] != 0
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.data[row * self.width + col] = value as u8;
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    /// Iterates `(row, col)` of set pixels in raster order.
    pub fn ones(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0)
            .map(move |(i, _)| (i / w, i % w))
    }

    /// The `n`-th set pixel in raster order.
    pub fn nth_one(&self, n: usize) -> Option<(usize, usize)> {
        self.ones().nth(n)
    }

    fn check_same(&self, other: &Mask) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::Shape(format!(
                "{}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }

    fn zip_with(&self, other: &Mask, f: impl Fn(u8, u8) -> u8) -> Result<Mask> {
        self.check_same(other)?;
        Ok(Mask {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn and(&self, other: &Mask) -> Result<Mask> {
        self.zip_with(other, |a, b| a & b)
    }

    pub fn or(&self, other: &Mask) -> Result<Mask> {
        self.zip_with(other, |a, b| a | b)
    }

    pub fn xor(&self, other: &Mask) -> Result<Mask> {
        self.zip_with(other, |a, b| a ^ b)
    }

    /// Pixels set in `self` but not in `other`.
    pub fn and_not(&self, other: &Mask) -> Result<Mask> {
        self.zip_with(other, |a, b| a & (1 - b))
    }

    pub fn not(&self) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| 1 - v).collect(),
        }
    }

    pub fn intersection_count(&self, other: &Mask) -> Result<usize> {
        self.check_same(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .filter(|(&a, &b)| a & b != 0)
            .count())
    }

    pub fn union_count(&self, other: &Mask) -> Result<usize> {
        self.check_same(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .filter(|(&a, &b)| a | b != 0)
            .count())
    }

    /// Nearest-neighbour resampling with half-pixel centres.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Mask {
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        Mask::from_fn(height, width, |r, c| {
            let sr = (((r as f64 + 0.5) * sy) as usize).min(self.height - 1);
            let sc = (((c as f64 + 0.5) * sx) as usize).min(self.width - 1);
            self.get(sr, sc)
        })
    }

    /// Copies the `height`×`width` window starting at (`top`, `left`).
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Mask> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::Shape(format!(
                "crop {height}x{width}+{top}+{left} exceeds {}x{}",
                self.height, self.width
            )));
        }
        Ok(Mask::from_fn(height, width, |r, c| {
            self.get(top + r, left + c)
        }))
    }

    /// Places the mask at the top-left of a zero `height`×`width` canvas.
    pub fn pad_to(&self, height: usize, width: usize) -> Result<Mask> {
        if height < self.height || width < self.width {
            return Err(Error::Shape("pad target smaller than mask".into()));
        }
        Ok(Mask::from_fn(height, width, |r, c| {
            r < self.height && c < self.width && self.get(r, c)
        }))
    }

    pub fn flip_horizontal(&self) -> Mask {
        Mask::from_fn(self.height, self.width, |r, c| {
            self.get(r, self.width - 1 - c)
        })
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }

    /// 8-bit grayscale rendering: 0 for background, 255 for foreground.
    pub fn to_gray8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| v * 255).collect()
    }

    /// Inverse of [`Mask::to_gray8`]; any value above 127 counts as foreground.
    pub fn from_gray8(height: usize, width: usize, gray: &[u8]) -> Result<Mask> {
        if gray.len() != height * width {
            return Err(Error::Shape("gray buffer size".into()));
        }
        Ok(Mask {
            height,
            width,
            data: gray.iter().map(|&v| (v > 127) as u8).collect(),
        })
    }
}

/// Label value used for void / ignore pixels in the benchmark masks.
pub const VOID_LABEL: u8 = 255;

/// A single-channel semantic label map (0 = background, 1..=20 classes, 255 void).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "label buffer has {} values, expected {height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    /// Sorted class ids present, excluding background and void.
    pub fn classes(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &v in &self.data {
            seen[v as usize] = true;
        }
        (1..=254u8).filter(|&c| seen[c as usize]).collect()
    }

    /// Foreground where the label equals `class`; void counts as background.
    pub fn class_mask(&self, class: u8) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| (v == class) as u8).collect(),
        }
    }

    /// Union of every labelled class other than `class` (void excluded).
    pub fn other_classes_mask(&self, class: u8) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .map(|&v| (v != 0 && v != VOID_LABEL && v != class) as u8)
                .collect(),
        }
    }
}
