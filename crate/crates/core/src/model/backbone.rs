//! Frozen feature extractors producing stride-8 "mid-level" features.

use candle_core::Tensor;

use super::config::{BackboneVariant, FEATURE_STRIDE};
use super::params::{Conv, ConvSpec, FrozenBatchNorm, Init};
use crate::error::Result;

const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

pub enum Backbone {
    ResNet50(ResNet50),
    Tiny(TinyBackbone),
}

impl Backbone {
    pub fn new(variant: BackboneVariant, init: &mut Init<'_>) -> Result<Self> {
        init.scoped("backbone", |init| {
            Ok(match variant {
                BackboneVariant::ResNet50 => Backbone::ResNet50(ResNet50::new(init)?),
                BackboneVariant::Tiny => Backbone::Tiny(TinyBackbone::new(init)?),
            })
        })
    }

    /// `x` is `1×3×H×W` in `[0, 1]` with H and W multiples of 8. The result is
    /// detached from any autograd graph.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dev = x.device();
        let mean = Tensor::new(&IMAGENET_MEAN, dev)?
            .to_dtype(x.dtype())?
            .reshape((1, 3, 1, 1))?;
        let std = Tensor::new(&IMAGENET_STD, dev)?
            .to_dtype(x.dtype())?
            .reshape((1, 3, 1, 1))?;
        let x = x.broadcast_sub(&mean)?.broadcast_div(&std)?;
        let out = match self {
            Backbone::ResNet50(net) => net.forward(&x)?,
            Backbone::Tiny(net) => net.forward(&x)?,
        };
        debug_assert_eq!(out.dim(2)? * FEATURE_STRIDE, x.dim(2)?);
        Ok(out.detach())
    }
}

pub struct TinyBackbone {
    stage1: Conv,
    stage2: Conv,
    stage3: Conv,
}

impl TinyBackbone {
    fn new(init: &mut Init<'_>) -> Result<Self> {
        Ok(Self {
            stage1: init.conv("stage1", ConvSpec::k3(3, 16).stride(2))?,
            stage2: init.conv("stage2", ConvSpec::k3(16, 32).stride(2))?,
            stage3: init.conv("stage3", ConvSpec::k3(32, 32).stride(2))?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let s1 = self.stage1.forward_relu(x)?;
        let s2 = self.stage2.forward_relu(&s1)?;
        let s3 = self.stage3.forward_relu(&s2)?;
        let s2_down = s2.avg_pool2d(2)?;
        Ok(Tensor::cat(&[&s2_down, &s3], 1)?)
    }
}

struct Bottleneck {
    conv1: Conv,
    bn1: FrozenBatchNorm,
    conv2: Conv,
    bn2: FrozenBatchNorm,
    conv3: Conv,
    bn3: FrozenBatchNorm,
    downsample: Option<(Conv, FrozenBatchNorm)>,
}

impl Bottleneck {
    fn new(
        init: &mut Init<'_>,
        in_channels: usize,
        planes: usize,
        stride: usize,
        dilation: usize,
    ) -> Result<Self> {
        let out = planes * 4;
        let downsample = if stride != 1 || in_channels != out {
            Some(init.scoped("downsample", |init| {
                Ok((
                    init.conv("0", ConvSpec::k1(in_channels, out).stride(stride).no_bias())?,
                    init.batch_norm("1", out)?,
                ))
            })?)
        } else {
            None
        };
        Ok(Self {
            conv1: init.conv("conv1", ConvSpec::k1(in_channels, planes).no_bias())?,
            bn1: init.batch_norm("bn1", planes)?,
            conv2: init.conv(
                "conv2",
                ConvSpec::k3(planes, planes)
                    .stride(stride)
                    .padding(dilation)
                    .dilation(dilation)
                    .no_bias(),
            )?,
            bn2: init.batch_norm("bn2", planes)?,
            conv3: init.conv("conv3", ConvSpec::k1(planes, out).no_bias())?,
            bn3: init.batch_norm("bn3", out)?,
            downsample,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.bn1.forward(&self.conv1.forward(x)?)?.relu()?;
        let y = self.bn2.forward(&self.conv2.forward(&y)?)?.relu()?;
        let y = self.bn3.forward(&self.conv3.forward(&y)?)?;
        let skip = match &self.downsample {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?)?,
            None => x.clone(),
        };
        Ok((y + skip)?.relu()?)
    }
}

/// Residual network trunk (conv1..layer3) with layer3 dilated so the output
/// stays at stride 8. Parameter names follow the torchvision layout, so a
/// converted ImageNet checkpoint loads directly under the `backbone.` prefix.
pub struct ResNet50 {
    conv1: Conv,
    bn1: FrozenBatchNorm,
    layer1: Vec<Bottleneck>,
    layer2: Vec<Bottleneck>,
    layer3: Vec<Bottleneck>,
}

impl ResNet50 {
    fn new(init: &mut Init<'_>) -> Result<Self> {
        let conv1 = init.conv(
            "conv1",
            ConvSpec::k3(3, 64).kernel(7).stride(2).padding(3).no_bias(),
        )?;
        let bn1 = init.batch_norm("bn1", 64)?;
        let mut layer = |name: &str,
                         blocks: usize,
                         in_channels: usize,
                         planes: usize,
                         stride: usize,
                         dilation: usize|
         -> Result<Vec<Bottleneck>> {
            init.scoped(name, |init| {
                (0..blocks)
                    .map(|i| {
                        init.scoped(&i.to_string(), |init| {
                            if i == 0 {
                                Bottleneck::new(init, in_channels, planes, stride, dilation)
                            } else {
                                Bottleneck::new(init, planes * 4, planes, 1, dilation)
                            }
                        })
                    })
                    .collect()
            })
        };
        let layer1 = layer("layer1", 3, 64, 64, 1, 1)?;
        let layer2 = layer("layer2", 4, 256, 128, 2, 1)?;
        let layer3 = layer("layer3", 6, 512, 256, 1, 2)?;
        Ok(Self {
            conv1,
            bn1,
            layer1,
            layer2,
            layer3,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.bn1.forward(&self.conv1.forward(x)?)?.relu()?;
        // Inputs are non-negative after ReLU, so zero padding equals -inf padding.
        let y = y
            .pad_with_zeros(2, 1, 1)?
            .pad_with_zeros(3, 1, 1)?
            .max_pool2d_with_stride(3, 2)?;
        let mut y = y;
        for b in &self.layer1 {
            y = b.forward(&y)?;
        }
        for b in &self.layer2 {
            y = b.forward(&y)?;
        }
        let l2 = y.clone();
        for b in &self.layer3 {
            y = b.forward(&y)?;
        }
        Ok(Tensor::cat(&[&l2, &y], 1)?)
    }
}
