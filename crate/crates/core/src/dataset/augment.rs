//! Training-time geometric augmentation and evaluation-time aspect-preserving
//! resize with zero padding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::rgb::RgbImage;

/// Random draw for one augmentation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub flip: bool,
    pub angle_deg: f64,
    /// Fractional crop position in `[0, 1]` along each axis.
    pub crop_y: f64,
    pub crop_x: f64,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        flip: false,
        angle_deg: 0.0,
        crop_y: 0.5,
        crop_x: 0.5,
    };

    /// Mirror with probability 1/2, rotation uniform in [-10°, 10°], uniform crop.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            flip: rng.random_bool(0.5),
            angle_deg: rng.random_range(-10.0..=10.0),
            crop_y: rng.random(),
            crop_x: rng.random(),
        }
    }
}

/// Flip, rotate about the centre, zero-pad (bottom/right) to at least the
/// crop size, then crop `out × out`. Coordinates are continuous with pixel
/// `(r, c)` centred at `(r + 0.5, c + 0.5)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeometricTransform {
    pub src_height: usize,
    pub src_width: usize,
    pub out: usize,
    pub flip: bool,
    pub angle_rad: f64,
    pub top: usize,
    pub left: usize,
}

impl GeometricTransform {
    pub fn new(src_height: usize, src_width: usize, out: usize, params: &AugmentParams) -> Self {
        let slack_y = src_height.max(out) - out;
        let slack_x = src_width.max(out) - out;
        Self {
            src_height,
            src_width,
            out,
            flip: params.flip,
            angle_rad: params.angle_deg.to_radians(),
            top: (params.crop_y.clamp(0.0, 1.0) * slack_y as f64).round() as usize,
            left: (params.crop_x.clamp(0.0, 1.0) * slack_x as f64).round() as usize,
        }
    }

    fn centre(&self) -> (f64, f64) {
        (self.src_height as f64 / 2.0, self.src_width as f64 / 2.0)
    }

    /// Source coordinates of an output location.
    pub fn to_source(&self, y: f64, x: f64) -> (f64, f64) {
        let (y, x) = (y + self.top as f64, x + self.left as f64);
        let (cy, cx) = self.centre();
        let (s, c) = self.angle_rad.sin_cos();
        // Inverse rotation.
        let dy = y - cy;
        let dx = x - cx;
        let (y, x) = (cy + c * dy + s * dx, cx - s * dy + c * dx);
        if self.flip {
            (y, self.src_width as f64 - x)
        } else {
            (y, x)
        }
    }

    /// Output coordinates of a source location.
    pub fn to_output(&self, y: f64, x: f64) -> (f64, f64) {
        let x = if self.flip { self.src_width as f64 - x } else { x };
        let (cy, cx) = self.centre();
        let (s, c) = self.angle_rad.sin_cos();
        let dy = y - cy;
        let dx = x - cx;
        let (y, x) = (cy + c * dy - s * dx, cx + s * dy + c * dx);
        (y - self.top as f64, x - self.left as f64)
    }

    pub fn apply_image(&self, image: &RgbImage) -> RgbImage {
        let mut out = RgbImage::zeros(self.out, self.out);
        let mut px = [0.0f32; 3];
        for r in 0..self.out {
            for c in 0..self.out {
                let (y, x) = self.to_source(r as f64 + 0.5, c as f64 + 0.5);
                image.sample_bilinear(y, x, &mut px);
                out.pixel_mut(r, c).copy_from_slice(&px);
            }
        }
        out
    }

    /// Nearest-neighbour warp; locations mapping outside the source are 0.
    pub fn apply_mask(&self, mask: &Mask) -> Mask {
        let (h, w) = mask.dims();
        Mask::from_fn(self.out, self.out, |r, c| {
            let (y, x) = self.to_source(r as f64 + 0.5, c as f64 + 0.5);
            let (y, x) = (y.floor(), x.floor());
            y >= 0.0 && x >= 0.0 && (y as usize) < h && (x as usize) < w && mask.get(y as usize, x as usize)
        })
    }

    /// Pulls an output-space mask back to source space. Source pixels that
    /// were not visible in the output keep their value from `fallback`.
    pub fn invert_mask(&self, out_mask: &Mask, fallback: &Mask) -> Result<Mask> {
        if out_mask.dims() != (self.out, self.out)
            || fallback.dims() != (self.src_height, self.src_width)
        {
            return Err(Error::Shape("invert_mask dimensions".into()));
        }
        Ok(Mask::from_fn(self.src_height, self.src_width, |r, c| {
            let (y, x) = self.to_output(r as f64 + 0.5, c as f64 + 0.5);
            let (y, x) = (y.floor(), x.floor());
            if y >= 0.0 && x >= 0.0 && (y as usize) < self.out && (x as usize) < self.out {
                out_mask.get(y as usize, x as usize)
            } else {
                fallback.get(r, c)
            }
        }))
    }

    /// Maps an output pixel to the source pixel it was sampled from, if any.
    pub fn source_pixel(&self, row: usize, col: usize) -> Option<(usize, usize)> {
        let (y, x) = self.to_source(row as f64 + 0.5, col as f64 + 0.5);
        let (y, x) = (y.floor(), x.floor());
        (y >= 0.0 && x >= 0.0 && (y as usize) < self.src_height && (x as usize) < self.src_width)
            .then_some((y as usize, x as usize))
    }
}

/// Applies one random geometric draw to the image and every mask.
pub fn augment<R: Rng + ?Sized>(
    image: &RgbImage,
    masks: &[&Mask],
    out: usize,
    rng: &mut R,
) -> (RgbImage, Vec<Mask>, GeometricTransform) {
    let t = GeometricTransform::new(image.height, image.width, out, &AugmentParams::sample(rng));
    (
        t.apply_image(image),
        masks.iter().map(|m| t.apply_mask(m)).collect(),
        t,
    )
}

/// How an image was placed on the square evaluation canvas.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PadMeta {
    pub orig_height: usize,
    pub orig_width: usize,
    pub scaled_height: usize,
    pub scaled_width: usize,
    pub target: usize,
}

impl PadMeta {
    pub fn new(orig_height: usize, orig_width: usize, target: usize) -> Self {
        let long = orig_height.max(orig_width) as f64;
        let scale = target as f64 / long;
        let sh = ((orig_height as f64 * scale).round() as usize).clamp(1, target);
        let sw = ((orig_width as f64 * scale).round() as usize).clamp(1, target);
        Self {
            orig_height,
            orig_width,
            scaled_height: sh,
            scaled_width: sw,
            target,
        }
    }

    /// Canvas mask back to original resolution; padding is dropped.
    pub fn unpad(&self, canvas: &Mask) -> Result<Mask> {
        if canvas.dims() != (self.target, self.target) {
            return Err(Error::Shape("canvas size".into()));
        }
        Ok(canvas
            .crop(0, 0, self.scaled_height, self.scaled_width)?
            .resize_nearest(self.orig_height, self.orig_width))
    }

    /// Original-resolution mask onto the canvas.
    pub fn pad(&self, mask: &Mask) -> Result<Mask> {
        if mask.dims() != (self.orig_height, self.orig_width) {
            return Err(Error::Shape("original size".into()));
        }
        mask.resize_nearest(self.scaled_height, self.scaled_width)
            .pad_to(self.target, self.target)
    }

    /// Canvas pixel of an original-resolution pixel.
    pub fn to_canvas(&self, row: usize, col: usize) -> (usize, usize) {
        let sy = self.scaled_height as f64 / self.orig_height as f64;
        let sx = self.scaled_width as f64 / self.orig_width as f64;
        (
            (((row as f64 + 0.5) * sy) as usize).min(self.scaled_height - 1),
            (((col as f64 + 0.5) * sx) as usize).min(self.scaled_width - 1),
        )
    }
}

/// Scales the longest side to `target`, keeping aspect ratio, and zero-pads
/// the rest at the bottom/right.
pub fn resize_with_aspect_pad(
    image: &RgbImage,
    mask: Option<&Mask>,
    target: usize,
) -> Result<(RgbImage, Option<Mask>, PadMeta)> {
    if image.height == 0 || image.width == 0 {
        return Err(Error::InvalidInput("zero-area image".into()));
    }
    let meta = PadMeta::new(image.height, image.width, target);
    let scaled = if (meta.scaled_height, meta.scaled_width) == (image.height, image.width) {
        image.clone()
    } else {
        image.resize_bilinear(meta.scaled_height, meta.scaled_width)
    };
    let canvas = scaled.pad_to(target, target);
    let mask = mask.map(|m| meta.pad(m)).transpose()?;
    Ok((canvas, mask, meta))
}
