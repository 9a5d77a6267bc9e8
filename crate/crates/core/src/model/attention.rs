//! Training-free attention prior.

use candle_core::{DType, Tensor};

use super::FeatureMap;
use crate::error::{Error, Result};
use crate::mask::Mask;

/// For every query cell, the maximum cosine similarity to any support
/// foreground cell, min-max normalised over the query map to `[0, 1]`.
///
/// Returns `1×1×H'×W'` with no autograd history. An empty support foreground
/// or a constant similarity map gives all zeros. Zero-norm feature vectors
/// have cosine 0 with everything.
pub fn attention_prior(support: &FeatureMap, query: &FeatureMap, support_fg: &Mask) -> Result<Tensor> {
    let (cs, hs, ws) = support.dims();
    let (cq, hq, wq) = query.dims();
    if cs != cq {
        return Err(Error::Shape(format!(
            "support has {cs} channels, query has {cq}"
        )));
    }
    if support_fg.dims() != (hs, ws) {
        return Err(Error::Shape(format!(
            "support foreground {:?} vs feature grid {hs}x{ws}",
            support_fg.dims()
        )));
    }
    let dev = query.data.device();
    let dtype = query.data.dtype();
    let zeros = || -> Result<Tensor> { Ok(Tensor::zeros((1, 1, hq, wq), dtype, dev)?) };
    let fg_idx: Vec<u32> = support_fg
        .ones()
        .map(|(r, c)| (r * ws + c) as u32)
        .collect();
    if fg_idx.is_empty() {
        return zeros();
    }
    // Rows are cells, columns channels; computed in f64 and detached.
    let rows = |f: &FeatureMap| -> Result<Tensor> {
        let (c, h, w) = f.dims();
        Ok(f.data
            .detach()
            .to_dtype(DType::F64)?
            .reshape((c, h * w))?
            .t()?
            .contiguous()?)
    };
    let unit = |m: Tensor| -> Result<Tensor> {
        let norm = m.sqr()?.sum_keepdim(1)?.sqrt()?;
        // Zero rows stay zero.
        let safe = norm.clamp(f64::MIN_POSITIVE, f64::INFINITY)?;
        Ok(m.broadcast_div(&safe)?)
    };
    let idx = Tensor::from_vec(fg_idx, support_fg.count(), dev)?;
    let s = unit(rows(support)?.index_select(&idx, 0)?)?;
    let q = unit(rows(query)?)?;
    let sim = q.matmul(&s.t()?)?;
    let raw = sim.max(1)?;
    let lo = raw.min(0)?.to_scalar::<f64>()?;
    let hi = raw.max(0)?.to_scalar::<f64>()?;
    if hi <= lo {
        return zeros();
    }
    let norm = ((raw - lo)? / (hi - lo))?;
    Ok(norm.reshape((1, 1, hq, wq))?.to_dtype(dtype)?)
}
