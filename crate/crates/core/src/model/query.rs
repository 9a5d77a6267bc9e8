//! Multi-scale query path: at each scale the query feature is enriched with the
//! expanded support and click vectors, the attention prior and the previous
//! query mask; scales interact top-down and are fused for the final logits.

use candle_core::Tensor;

use super::ops::resize_bilinear;
use super::params::{Conv, ConvSpec, Init};
use crate::error::{Error, Result};

struct Scale {
    bin: usize,
    merge: Conv,
    inter: Option<Conv>,
    alpha: [Conv; 2],
    head: Conv,
}

pub struct QueryPath {
    scales: Vec<Scale>,
    fuse: Conv,
    fuse_alpha: [Conv; 2],
    head: Conv,
    channels: usize,
}

/// Inputs to one query forward pass, all at feature resolution.
pub struct QueryPathInput<'a> {
    pub query_feat: &'a Tensor,
    pub support_vector: &'a Tensor,
    pub click_vector: &'a Tensor,
    pub attention: &'a Tensor,
    pub prev_mask: &'a Tensor,
}

impl QueryPath {
    pub fn new(init: &mut Init<'_>, channels: usize, bins: &[usize]) -> Result<Self> {
        init.scoped("query", |init| {
            let c = channels;
            let mut scales = Vec::new();
            for (i, &bin) in bins.iter().enumerate() {
                scales.push(init.scoped(&format!("scale{i}"), |init| {
                    Ok(Scale {
                        bin,
                        merge: init.conv("merge", ConvSpec::k1(3 * c + 2, c))?,
                        inter: if i > 0 {
                            Some(init.conv("inter", ConvSpec::k1(2 * c, c))?)
                        } else {
                            None
                        },
                        alpha: [
                            init.conv("alpha0", ConvSpec::k3(c, c))?,
                            init.conv("alpha1", ConvSpec::k3(c, c))?,
                        ],
                        head: init.conv("head", ConvSpec::k1(c, 2))?,
                    })
                })?);
            }
            Ok(Self {
                fuse: init.conv("fuse", ConvSpec::k1(bins.len() * c, c))?,
                fuse_alpha: [
                    init.conv("fuse_alpha0", ConvSpec::k3(c, c))?,
                    init.conv("fuse_alpha1", ConvSpec::k3(c, c))?,
                ],
                head: init.conv("head", ConvSpec::k1(c, 2))?,
                scales,
                channels,
            })
        })
    }

    /// Returns feature-resolution final logits and one logits map per scale
    /// (`bin × bin`).
    pub fn forward(&self, input: &QueryPathInput<'_>) -> Result<(Tensor, Vec<Tensor>)> {
        let (_, c, h, w) = input.query_feat.dims4()?;
        if c != self.channels
            || input.support_vector.dims() != [1, c]
            || input.click_vector.dims() != [1, c]
        {
            return Err(Error::Shape(format!(
                "query path expects {} channels; got feature {c}, vectors {:?} / {:?}",
                self.channels,
                input.support_vector.dims(),
                input.click_vector.dims()
            )));
        }
        let sv = input.support_vector.reshape((1, c, 1, 1))?;
        let cv = input.click_vector.reshape((1, c, 1, 1))?;
        let mut merged: Vec<Tensor> = Vec::with_capacity(self.scales.len());
        let mut intermediate = Vec::with_capacity(self.scales.len());
        for scale in &self.scales {
            let s = scale.bin;
            let q = resize_bilinear(input.query_feat, s, s)?;
            let x = Tensor::cat(
                &[
                    &q,
                    &sv.broadcast_as((1, c, s, s))?,
                    &cv.broadcast_as((1, c, s, s))?,
                    &resize_bilinear(input.attention, s, s)?,
                    &resize_bilinear(input.prev_mask, s, s)?,
                ],
                1,
            )?;
            let mut m = scale.merge.forward_relu(&x)?;
            if let (Some(inter), Some(prev)) = (&scale.inter, merged.last()) {
                let prev = resize_bilinear(prev, s, s)?;
                m = (inter.forward_relu(&Tensor::cat(&[&m, &prev], 1)?)? + &m)?;
            }
            let refined = scale.alpha[1].forward_relu(&scale.alpha[0].forward_relu(&m)?)?;
            let m = (refined + m)?;
            intermediate.push(scale.head.forward(&m)?);
            merged.push(m);
        }
        let upsampled = merged
            .iter()
            .map(|m| resize_bilinear(m, h, w))
            .collect::<Result<Vec<_>>>()?;
        let fused = self.fuse.forward_relu(&Tensor::cat(&upsampled, 1)?)?;
        let refined = self.fuse_alpha[1].forward_relu(&self.fuse_alpha[0].forward_relu(&fused)?)?;
        let out = self.head.forward(&(refined + fused)?)?;
        Ok((out, intermediate))
    }
}
