//! Pixel-level binary cross-entropy on two-channel logits.

use candle_core::{DType, Tensor};

use super::ops::mask_to_tensor;
use super::Logits;
use crate::error::{Error, Result};
use crate::mask::Mask;

/// Mean BCE of `p = softmax(logits)[fg]` against a binary target.
///
/// With `d = fg − bg`, the per-pixel term is `max(d, 0) − d·y + ln(1 + e^{−|d|})`.
pub fn bce(logits: &Logits, target: &Mask) -> Result<Tensor> {
    let (h, w) = logits.spatial();
    if target.dims() != (h, w) {
        return Err(Error::Shape(format!(
            "target {:?} vs logits {h}x{w}",
            target.dims()
        )));
    }
    let t = &logits.data;
    let d = (t.narrow(1, 1, 1)? - t.narrow(1, 0, 1)?)?;
    let y = mask_to_tensor(target, t.dtype(), t.device())?;
    let softplus_neg_abs = (d.abs()?.neg()?.exp()? + 1.0)?.log()?;
    let per_pixel = ((d.relu()? - (&d * &y)?)? + softplus_neg_abs)?;
    Ok(per_pixel.mean_all()?)
}

/// `mean_k BCE(support) + mean_n BCE(intermediate query) + BCE(final query)`.
///
/// Intermediate targets are the query mask resampled (nearest) to each
/// intermediate map's size.
pub fn compute_loss(
    support_logits: &[Logits],
    support_masks: &[Mask],
    intermediate_logits: &[Logits],
    final_logits: &Logits,
    query_mask: &Mask,
) -> Result<Tensor> {
    if support_logits.is_empty() || intermediate_logits.is_empty() {
        return Err(Error::InvalidInput(
            "loss needs at least one support and one intermediate prediction".into(),
        ));
    }
    if support_logits.len() != support_masks.len() {
        return Err(Error::Shape(format!(
            "{} support logits vs {} support masks",
            support_logits.len(),
            support_masks.len()
        )));
    }
    // Averaged in f64 so the result does not depend on term order in practice.
    let mean = |terms: Vec<Tensor>| -> Result<Tensor> {
        let n = terms.len() as f64;
        let dtype = terms[0].dtype();
        let wide = terms
            .iter()
            .map(|t| t.to_dtype(DType::F64))
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok((Tensor::stack(&wide, 0)?.sum_all()? / n)?.to_dtype(dtype)?)
    };
    let support = mean(
        support_logits
            .iter()
            .zip(support_masks)
            .map(|(l, m)| bce(l, m))
            .collect::<Result<_>>()?,
    )?;
    let intermediate = mean(
        intermediate_logits
            .iter()
            .map(|l| {
                let (h, w) = l.spatial();
                bce(l, &query_mask.resize_nearest(h, w))
            })
            .collect::<Result<_>>()?,
    )?;
    let last = bce(final_logits, query_mask)?;
    Ok(((support + intermediate)? + last)?)
}
