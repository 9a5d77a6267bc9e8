//! RGB images as planar-free `f32` buffers in `[0, 1]`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::mask::LabelMap;

/// Row-major H×W×3 image, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "image buffer has {} values, expected {height}x{width}x3",
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("image contains non-finite values".into()));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    /// Accepts an interleaved buffer with an explicit channel count; only 3 is valid.
    pub fn from_interleaved(
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        if channels != 3 {
            return Err(Error::InvalidInput(format!(
                "expected 3 colour channels, got {channels}"
            )));
        }
        if height == 0 || width == 0 {
            return Err(Error::InvalidInput("zero-area image".into()));
        }
        Self::new(height, width, data)
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.data[(row * self.width + col) * 3 + ch]
    }

    #[inline]
    pub fn pixel_mut(&mut self, row: usize, col: usize) -> &mut [f32] {
        let i = (row * self.width + col) * 3;
        &mut self.data[i..i + 3]
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path.as_ref())?.to_rgb8();
        Ok(Self::from_rgb8(&img))
    }

    /// Decodes any supported encoded image held in memory.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        Ok(Self::from_rgb8(&image::load_from_memory(bytes)?.to_rgb8()))
    }

    /// Lossless 8-bit PNG encoding.
    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = std::io::Cursor::new(Vec::new());
        self.to_rgb8().write_to(&mut out, image::ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = img.dimensions();
        Self {
            height: h as usize,
            width: w as usize,
            data: img.as_raw().iter().map(|&v| v as f32 / 255.0).collect(),
        }
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let raw = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer size matches dimensions")
    }

    /// Bilinear sample with half-pixel centres; outside the image reads as zero.
    pub fn sample_bilinear(&self, y: f64, x: f64, out: &mut [f32; 3]) {
        let y = y - 0.5;
        let x = x - 0.5;
        let y0 = y.floor();
        let x0 = x.floor();
        let fy = (y - y0) as f32;
        let fx = (x - x0) as f32;
        *out = [0.0; 3];
        for (dy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
            for (dx, wx) in [(0i64, 1.0 - fx), (1, fx)] {
                let r = y0 as i64 + dy;
                let c = x0 as i64 + dx;
                if r < 0 || c < 0 || r >= self.height as i64 || c >= self.width as i64 {
                    continue;
                }
                let w = wy * wx;
                if w == 0.0 {
                    continue;
                }
                for (ch, o) in out.iter_mut().enumerate() {
                    *o += w * self.get(r as usize, c as usize, ch);
                }
            }
        }
    }

    /// Bilinear resize (edge-clamped, half-pixel centres).
    pub fn resize_bilinear(&self, height: usize, width: usize) -> RgbImage {
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let mut out = RgbImage::zeros(height, width);
        for r in 0..height {
            let y = ((r as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = y.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let fy = (y - y0 as f64) as f32;
            for c in 0..width {
                let x = ((c as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = x.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let fx = (x - x0 as f64) as f32;
                let px = out.pixel_mut(r, c);
                for (ch, p) in px.iter_mut().enumerate() {
                    let top = self.get(y0, x0, ch) * (1.0 - fx) + self.get(y0, x1, ch) * fx;
                    let bot = self.get(y1, x0, ch) * (1.0 - fx) + self.get(y1, x1, ch) * fx;
                    *p = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        out
    }

    /// Places the image at the top-left of a zero canvas.
    pub fn pad_to(&self, height: usize, width: usize) -> RgbImage {
        let mut out = RgbImage::zeros(height.max(self.height), width.max(self.width));
        for r in 0..self.height {
            let src = &self.data[r * self.width * 3..(r + 1) * self.width * 3];
            let start = r * out.width * 3;
            out.data[start..start + self.width * 3].copy_from_slice(src);
        }
        out
    }

    pub fn flip_horizontal(&self) -> RgbImage {
        let mut out = RgbImage::zeros(self.height, self.width);
        for r in 0..self.height {
            for c in 0..self.width {
                let src = (r * self.width + (self.width - 1 - c)) * 3;
                out.pixel_mut(r, c)
                    .copy_from_slice(&self.data[src..src + 3]);
            }
        }
        out
    }
}

/// Reads a single-channel 8-bit PNG as raw label indices.
///
/// Palette PNGs (the benchmark's native encoding) yield their palette
/// indices, not the expanded colours.
pub fn read_label_png(path: impl AsRef<Path>) -> Result<LabelMap> {
    let file = std::fs::File::open(path.as_ref())?;
    let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info()?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf)?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Dataset(format!(
            "{}: expected 8-bit label png, got {:?}",
            path.as_ref().display(),
            info.bit_depth
        )));
    }
    match info.color_type {
        png::ColorType::Indexed | png::ColorType::Grayscale => {}
        other => {
            return Err(Error::Dataset(format!(
                "{}: expected single-channel label png, got {other:?}",
                path.as_ref().display()
            )))
        }
    }
    buf.truncate(info.buffer_size());
    LabelMap::new(info.height as usize, info.width as usize, buf)
}

/// Writes raw label indices as an 8-bit grayscale PNG.
pub fn write_label_png(path: impl AsRef<Path>, labels: &LabelMap) -> Result<()> {
    let bytes = encode_gray_png(labels.height, labels.width, &labels.data)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn encode_gray_png(height: usize, width: usize, gray: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        enc.set_compression(png::Compression::Best);
        let mut writer = enc.write_header()?;
        writer.write_image_data(gray)?;
    }
    Ok(out)
}

pub fn decode_gray_png(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info()?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf)?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::InvalidInput("expected 8-bit grayscale png".into()));
    }
    buf.truncate(info.buffer_size());
    Ok((info.height as usize, info.width as usize, buf))
}
