//! Support path: a U-shaped network over backbone features plus click and
//! previous-mask channels, and the two vectors it hands to the query path.

use candle_core::Tensor;

use super::params::{Conv, ConvSpec, Init, UpConv};
use super::ops::max_pool_2x2;
use super::FeatureMap;
use crate::error::{Error, Result};
use crate::mask::Mask;

/// Two 3×3 conv + ReLU layers.
struct DoubleConv {
    a: Conv,
    b: Conv,
}

impl DoubleConv {
    fn new(init: &mut Init<'_>, name: &str, cin: usize, cout: usize) -> Result<Self> {
        init.scoped(name, |init| {
            Ok(Self {
                a: init.conv("a", ConvSpec::k3(cin, cout))?,
                b: init.conv("b", ConvSpec::k3(cout, cout))?,
            })
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.b.forward_relu(&self.a.forward_relu(x)?)
    }
}

pub struct SupportPath {
    encoders: Vec<DoubleConv>,
    ups: Vec<UpConv>,
    decoders: Vec<DoubleConv>,
    head: Conv,
    click_reduce: Conv,
    depth: usize,
}

impl SupportPath {
    pub fn new(init: &mut Init<'_>, channels: usize, base: usize, depth: usize) -> Result<Self> {
        init.scoped("support", |init| {
            let width = |level: usize| base << level;
            let mut encoders = vec![DoubleConv::new(init, "enc0", channels + 3, width(0))?];
            for level in 1..=depth {
                encoders.push(DoubleConv::new(
                    init,
                    &format!("enc{level}"),
                    width(level - 1),
                    width(level),
                )?);
            }
            let mut ups = Vec::new();
            let mut decoders = Vec::new();
            for level in (0..depth).rev() {
                ups.push(init.up_conv(&format!("up{level}"), width(level + 1), width(level))?);
                decoders.push(DoubleConv::new(
                    init,
                    &format!("dec{level}"),
                    2 * width(level),
                    width(level),
                )?);
            }
            Ok(Self {
                encoders,
                ups,
                decoders,
                head: init.conv("head", ConvSpec::k1(width(0), 2))?,
                click_reduce: init.conv("click_reduce", ConvSpec::k1(width(depth), channels))?,
                depth,
            })
        })
    }

    /// `x` is the feature map with the three auxiliary channels already
    /// concatenated, spatial dims multiples of `2^depth`. Returns
    /// feature-resolution logits and the bottleneck.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut skips = Vec::with_capacity(self.depth + 1);
        let mut y = self.encoders[0].forward(x)?;
        for enc in &self.encoders[1..] {
            skips.push(y.clone());
            y = enc.forward(&max_pool_2x2(&y)?)?;
        }
        let bottleneck = y.clone();
        for (up, dec) in self.ups.iter().zip(&self.decoders) {
            let skip = skips.pop().expect("one skip per level");
            let u = up.forward(&y)?;
            y = dec.forward(&Tensor::cat(&[&skip, &u], 1)?)?;
        }
        Ok((self.head.forward(&y)?, bottleneck))
    }

    /// 1×1 channel reduction of the bottleneck followed by global average pooling.
    pub fn click_vector(&self, bottleneck: &FeatureMap) -> Result<Tensor> {
        compute_click_vector(&self.click_reduce, bottleneck)
    }
}

pub(crate) fn compute_click_vector(reduce: &Conv, bottleneck: &FeatureMap) -> Result<Tensor> {
    let reduced = reduce.forward(&bottleneck.data)?;
    Ok(reduced.mean(3)?.mean(2)?)
}

/// Masked average pooling: per channel, the mean feature over foreground cells.
/// `fg` must be at feature resolution; an empty foreground yields zeros.
pub fn compute_support_vector(feat: &FeatureMap, fg: &Mask) -> Result<Tensor> {
    let (c, h, w) = feat.dims();
    if fg.dims() != (h, w) {
        return Err(Error::Shape(format!(
            "foreground mask {:?} vs feature grid {h}x{w}",
            fg.dims()
        )));
    }
    let count = fg.count();
    let dev = feat.data.device();
    let dtype = feat.data.dtype();
    if count == 0 {
        return Ok(Tensor::zeros((1, c), dtype, dev)?);
    }
    let m = super::ops::mask_to_tensor(fg, dtype, dev)?;
    let summed = feat.data.broadcast_mul(&m)?.sum(3)?.sum(2)?;
    Ok((summed / count as f64)?)
}
