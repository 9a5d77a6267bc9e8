//! The segmentation network.
//!
//! Both support and query images go through a frozen backbone and a shared
//! 1×1 reduction to `C` channels at stride 8. The support path predicts the
//! support mask from features plus click/previous-mask channels and emits a
//! support vector (masked average of features over its own prediction) and a
//! click vector (pooled bottleneck). A parameter-free attention prior relates
//! query cells to support foreground cells. With several supports the three
//! outputs are averaged before entering the query path.

pub mod attention;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod loss;
pub mod ops;
pub mod params;
pub mod query;
pub mod support;

use candle_core::{DType, Device, Tensor};

pub use attention::attention_prior;
pub use config::{BackboneVariant, ModelConfig, FEATURE_STRIDE};
pub use loss::{bce, compute_loss};
pub use params::{ParamGroup, ParamStore};
pub use support::compute_support_vector;

use self::backbone::Backbone;
use self::ops::{mask_to_feature_grid, mask_to_feature_res, pad_spatial_to_multiple, to_image_res};
use self::params::{Conv, ConvSpec, Init};
use self::query::{QueryPath, QueryPathInput};
use self::support::SupportPath;
use crate::clicks::ClickMasks;
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::rgb::RgbImage;

/// `1×C×H'×W'` features with the input-pixel stride of one cell.
#[derive(Clone, Debug)]
pub struct FeatureMap {
    pub data: Tensor,
    pub stride: usize,
}

impl FeatureMap {
    pub fn new(data: Tensor, stride: usize) -> Result<Self> {
        let (n, _, h, w) = data.dims4()?;
        if n != 1 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("feature map {:?}", data.dims())));
        }
        Ok(Self { data, stride })
    }

    /// `(C, H', W')`.
    pub fn dims(&self) -> (usize, usize, usize) {
        let d = self.data.dims();
        (d[1], d[2], d[3])
    }
}

/// `1×2×H×W` scores: channel 0 background, channel 1 foreground.
#[derive(Clone, Debug)]
pub struct Logits {
    pub data: Tensor,
}

impl Logits {
    pub fn new(data: Tensor) -> Result<Self> {
        let (n, c, _, _) = data.dims4()?;
        if n != 1 || c != 2 {
            return Err(Error::Shape(format!("logits {:?}", data.dims())));
        }
        Ok(Self { data })
    }

    pub fn spatial(&self) -> (usize, usize) {
        let d = self.data.dims();
        (d[2], d[3])
    }

    /// Channel argmax; ties go to background.
    pub fn binarize(&self) -> Result<Mask> {
        let (h, w) = self.spatial();
        let v = self
            .data
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?;
        let (bg, fg) = v.split_at(h * w);
        Mask::from_vec(
            h,
            w,
            bg.iter().zip(fg).map(|(b, f)| (f > b) as u8).collect(),
        )
    }
}

/// What the support path hands to the query path for one (support, query) pair.
#[derive(Clone, Debug)]
pub struct SupportBundle {
    /// `1×C`.
    pub support_vector: Tensor,
    /// `1×C`.
    pub click_vector: Tensor,
    /// `1×1×H'×W'`, values in `[0, 1]`.
    pub attention: Tensor,
}

/// Element-wise mean of `k ≥ 1` bundles. Accumulates in f64, so the result is
/// independent of bundle order for any realistic `k`.
pub fn aggregate_multi_support(bundles: &[SupportBundle]) -> Result<SupportBundle> {
    let first = bundles
        .first()
        .ok_or_else(|| Error::InvalidInput("no support bundles to aggregate".into()))?;
    for b in &bundles[1..] {
        if b.support_vector.dims() != first.support_vector.dims()
            || b.click_vector.dims() != first.click_vector.dims()
            || b.attention.dims() != first.attention.dims()
        {
            return Err(Error::Shape("support bundles differ in shape".into()));
        }
    }
    if bundles.len() == 1 {
        return Ok(first.clone());
    }
    let k = bundles.len() as f64;
    let mean = |pick: fn(&SupportBundle) -> &Tensor| -> Result<Tensor> {
        let dtype = pick(first).dtype();
        let wide = bundles
            .iter()
            .map(|b| pick(b).to_dtype(DType::F64))
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok((Tensor::stack(&wide, 0)?.sum(0)? / k)?.to_dtype(dtype)?)
    };
    Ok(SupportBundle {
        support_vector: mean(|b| &b.support_vector)?,
        click_vector: mean(|b| &b.click_vector)?,
        attention: mean(|b| &b.attention)?,
    })
}

pub struct SupportInput<'a> {
    pub image: &'a RgbImage,
    pub clicks: &'a ClickMasks,
    pub prev: &'a Mask,
}

/// Query images never carry clicks.
pub struct QueryInput<'a> {
    pub image: &'a RgbImage,
    pub prev: &'a Mask,
}

pub struct SupportOutput {
    pub logits: Logits,
    pub features: FeatureMap,
    pub bottleneck: FeatureMap,
    /// Binarised prediction at feature resolution.
    pub foreground: Mask,
    pub support_vector: Tensor,
    pub click_vector: Tensor,
}

pub struct QueryOutput {
    pub final_logits: Logits,
    pub intermediate: Vec<Logits>,
}

pub struct ForwardOutput {
    pub supports: Vec<SupportOutput>,
    pub queries: Vec<QueryOutput>,
}

pub struct Ifsenet {
    config: ModelConfig,
    device: Device,
    dtype: DType,
    params: ParamStore,
    backbone: Backbone,
    reduce: Conv,
    support: SupportPath,
    query: QueryPath,
    version: String,
}

impl Ifsenet {
    /// Fresh, seeded initialisation on the CPU in f32.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::with_options(config, seed, Device::Cpu, DType::F32)
    }

    pub fn with_options(config: ModelConfig, seed: u64, device: Device, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new(device.clone(), dtype);
        let (backbone, reduce, support, query) = {
            let mut init = Init::new(&mut params, seed);
            let backbone = Backbone::new(config.backbone, &mut init)?;
            let reduce = init.scoped("shared", |init| {
                init.conv(
                    "reduce",
                    ConvSpec::k1(config.backbone.out_channels(), config.feature_channels),
                )
            })?;
            let support = SupportPath::new(
                &mut init,
                config.feature_channels,
                config.support_base_channels,
                config.pooling_depth,
            )?;
            let query = QueryPath::new(&mut init, config.feature_channels, &config.query_bins)?;
            (backbone, reduce, support, query)
        };
        Ok(Self {
            config,
            device,
            dtype,
            params,
            backbone,
            reduce,
            support,
            query,
            version: "init".into(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn set_version(&mut self, version: impl Into<String>) {
        self.version = version.into();
    }

    /// `1×3×H*×W*` with H*, W* rounded up to multiples of the feature stride.
    pub fn image_tensor(&self, image: &RgbImage) -> Result<Tensor> {
        if image.height == 0 || image.width == 0 {
            return Err(Error::InvalidInput("zero-area image".into()));
        }
        let t = Tensor::from_vec(image.data.clone(), (image.height, image.width, 3), &self.device)?
            .permute((2, 0, 1))?
            .unsqueeze(0)?
            .to_dtype(self.dtype)?;
        pad_spatial_to_multiple(&t, FEATURE_STRIDE)
    }

    /// Frozen backbone followed by the shared reduction to `C` channels.
    pub fn extract_features(&self, image: &RgbImage) -> Result<FeatureMap> {
        let x = self.image_tensor(image)?;
        let mid = self.backbone.forward(&x)?;
        FeatureMap::new(self.reduce.forward_relu(&mid)?, FEATURE_STRIDE)
    }

    /// Support logits at the masks' (image) resolution and the encoder bottleneck.
    pub fn support_forward(
        &self,
        feat: &FeatureMap,
        pos_clicks: &Mask,
        neg_clicks: &Mask,
        prev_mask: &Mask,
    ) -> Result<(Logits, FeatureMap)> {
        let (_, h, w) = feat.dims();
        let (height, width) = pos_clicks.dims();
        if neg_clicks.dims() != (height, width) || prev_mask.dims() != (height, width) {
            return Err(Error::Shape("click and previous masks differ in size".into()));
        }
        let aux = [pos_clicks, neg_clicks, prev_mask]
            .into_iter()
            .map(|m| mask_to_feature_res(m, h, w, feat.stride, self.dtype, &self.device))
            .collect::<Result<Vec<_>>>()?;
        let x = Tensor::cat(&[&feat.data, &aux[0], &aux[1], &aux[2]], 1)?;
        let x = pad_spatial_to_multiple(&x, 1 << self.config.pooling_depth)?;
        let (logits, bottleneck) = self.support.forward(&x)?;
        let logits = logits.narrow(2, 0, h)?.narrow(3, 0, w)?;
        let logits = Logits::new(to_image_res(&logits, height, width, feat.stride)?)?;
        let bottleneck = FeatureMap::new(bottleneck, feat.stride << self.config.pooling_depth)?;
        Ok((logits, bottleneck))
    }

    pub fn compute_click_vector(&self, bottleneck: &FeatureMap) -> Result<Tensor> {
        self.support.click_vector(bottleneck)
    }

    /// Query logits at the previous mask's (image) resolution plus one
    /// intermediate map per scale.
    pub fn query_forward(
        &self,
        query_feat: &FeatureMap,
        bundle: &SupportBundle,
        prev_query_mask: &Mask,
    ) -> Result<QueryOutput> {
        let (_, h, w) = query_feat.dims();
        let (height, width) = prev_query_mask.dims();
        if bundle.attention.dims() != [1, 1, h, w] {
            return Err(Error::Shape(format!(
                "attention {:?} vs query grid {h}x{w}",
                bundle.attention.dims()
            )));
        }
        let prev = mask_to_feature_res(prev_query_mask, h, w, query_feat.stride, self.dtype, &self.device)?;
        let (out, intermediate) = self.query.forward(&QueryPathInput {
            query_feat: &query_feat.data,
            support_vector: &bundle.support_vector,
            click_vector: &bundle.click_vector,
            attention: &bundle.attention,
            prev_mask: &prev,
        })?;
        Ok(QueryOutput {
            final_logits: Logits::new(to_image_res(&out, height, width, query_feat.stride)?)?,
            intermediate: intermediate
                .into_iter()
                .map(Logits::new)
                .collect::<Result<_>>()?,
        })
    }

    /// Runs one support image through the support path and derives its vectors.
    pub fn run_support(&self, input: &SupportInput<'_>) -> Result<SupportOutput> {
        let features = self.extract_features(input.image)?;
        let (logits, bottleneck) = self.support_forward(
            &features,
            &input.clicks.positive,
            &input.clicks.negative,
            input.prev,
        )?;
        let (_, h, w) = features.dims();
        let foreground = mask_to_feature_grid(&logits.binarize()?, h, w, features.stride)?;
        let support_vector = compute_support_vector(&features, &foreground)?;
        let click_vector = self.compute_click_vector(&bottleneck)?;
        Ok(SupportOutput {
            logits,
            features,
            bottleneck,
            foreground,
            support_vector,
            click_vector,
        })
    }

    /// Query prediction from already-computed support outputs.
    pub fn run_query(&self, supports: &[SupportOutput], input: &QueryInput<'_>) -> Result<QueryOutput> {
        let qfeat = self.extract_features(input.image)?;
        let bundles = supports
            .iter()
            .map(|s| {
                Ok(SupportBundle {
                    support_vector: s.support_vector.clone(),
                    click_vector: s.click_vector.clone(),
                    attention: attention_prior(&s.features, &qfeat, &s.foreground)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let bundle = aggregate_multi_support(&bundles)?;
        self.query_forward(&qfeat, &bundle, input.prev)
    }

    /// One full pass: every support through the support path, then each query
    /// (one by one) through the query path with the averaged support bundle.
    pub fn forward(&self, supports: &[SupportInput<'_>], queries: &[QueryInput<'_>]) -> Result<ForwardOutput> {
        if supports.is_empty() {
            return Err(Error::InvalidInput("at least one support image is required".into()));
        }
        let supports = supports
            .iter()
            .map(|s| self.run_support(s))
            .collect::<Result<Vec<_>>>()?;
        let queries = queries
            .iter()
            .map(|q| self.run_query(&supports, q))
            .collect::<Result<Vec<_>>>()?;
        Ok(ForwardOutput { supports, queries })
    }
}
