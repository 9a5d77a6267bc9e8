//! Differentiable resampling and mask/tensor conversions.

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};
use crate::mask::Mask;

/// Row-stochastic `out × inp` bilinear interpolation matrix with half-pixel
/// centres and edge clamping (no anti-aliasing).
pub fn bilinear_matrix(out: usize, inp: usize) -> Vec<f64> {
    let mut m = vec![0.0; out * inp];
    let scale = inp as f64 / out as f64;
    for o in 0..out {
        let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(inp - 1);
        let frac = src - i0 as f64;
        m[o * inp + i0] += 1.0 - frac;
        m[o * inp + i1] += frac;
    }
    m
}

/// Bilinear resize of an `N×C×H×W` tensor, expressed as two matrix products
/// so gradients flow through it.
pub fn resize_bilinear(x: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if (h, w) == (height, width) {
        return Ok(x.clone());
    }
    let dev = x.device();
    let dtype = x.dtype();
    let mut y = x.clone();
    if h != height {
        let ry = Tensor::from_vec(bilinear_matrix(height, h), (height, h), dev)?.to_dtype(dtype)?;
        y = ry.broadcast_matmul(&y)?;
    }
    if w != width {
        let rx = Tensor::from_vec(bilinear_matrix(width, w), (width, w), dev)?
            .to_dtype(dtype)?
            .t()?
            .contiguous()?;
        y = y.broadcast_matmul(&rx)?;
    }
    Ok(y)
}

/// `1×1×H×W` tensor of 0/1 values.
pub fn mask_to_tensor(mask: &Mask, dtype: DType, device: &Device) -> Result<Tensor> {
    let (h, w) = mask.dims();
    Ok(Tensor::from_vec(mask.to_f32(), (1, 1, h, w), device)?.to_dtype(dtype)?)
}

/// Brings an image-resolution mask to an `h×w` feature grid of the given
/// stride: zero-pad to `h·stride × w·stride`, then bilinear downsampling.
pub fn mask_to_feature_res(
    mask: &Mask,
    h: usize,
    w: usize,
    stride: usize,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let (mh, mw) = mask.dims();
    if mh.div_ceil(stride) != h || mw.div_ceil(stride) != w {
        return Err(Error::Shape(format!(
            "{mh}x{mw} mask does not map onto a {h}x{w} feature grid at stride {stride}"
        )));
    }
    let padded = mask.pad_to(h * stride, w * stride)?;
    resize_bilinear(&mask_to_tensor(&padded, dtype, device)?, h, w)
}

/// Binary mask at feature resolution via nearest-neighbour sampling of the
/// padded image-resolution mask.
pub fn mask_to_feature_grid(mask: &Mask, h: usize, w: usize, stride: usize) -> Result<Mask> {
    let padded = mask.pad_to(h * stride, w * stride)?;
    Ok(padded.resize_nearest(h, w))
}

/// Upsamples feature-resolution maps to the padded input size and crops to
/// `height × width`.
pub fn to_image_res(x: &Tensor, height: usize, width: usize, stride: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let up = resize_bilinear(x, h * stride, w * stride)?;
    Ok(up.narrow(2, 0, height)?.narrow(3, 0, width)?)
}

/// Zero-pads the two spatial dims at the bottom/right up to multiples of `m`.
pub fn pad_spatial_to_multiple(x: &Tensor, m: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let ph = h.div_ceil(m) * m - h;
    let pw = w.div_ceil(m) * m - w;
    let mut y = x.clone();
    if ph > 0 {
        y = y.pad_with_zeros(2, 0, ph)?;
    }
    if pw > 0 {
        y = y.pad_with_zeros(3, 0, pw)?;
    }
    Ok(y)
}

/// 2×2 max pooling with stride 2 as a reshape plus two max reductions, so
/// the whole upstream gradient reaches the arg-max. Spatial dims must be even.
pub fn max_pool_2x2(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("max_pool_2x2 needs even dims, got {h}x{w}")));
    }
    Ok(x.reshape(vec![n, c, h / 2, 2, w / 2, 2])?.max(5)?.max(3)?)
}
