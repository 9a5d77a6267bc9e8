//! Click-driven segmentation state shared by the evaluator and the service.
//!
//! Images live on a square canvas (aspect-preserving resize plus zero
//! padding). Clicks are addressed in original pixel coordinates and stamped
//! onto the canvas; masks are reported back at original resolution.

use crate::clicks::{check_bounds, encode_clicks, Click, ClickMasks, Polarity};
use crate::dataset::{resize_with_aspect_pad, PadMeta};
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::model::{Ifsenet, QueryInput, SupportInput};
use crate::rgb::RgbImage;

/// An image placed on the model's input canvas.
#[derive(Clone, Debug)]
pub struct PreparedImage {
    pub id: String,
    pub canvas: RgbImage,
    pub meta: PadMeta,
}

impl PreparedImage {
    pub fn new(id: impl Into<String>, image: &RgbImage, target: usize) -> Result<Self> {
        let (canvas, _, meta) = resize_with_aspect_pad(image, None, target)?;
        Ok(Self {
            id: id.into(),
            canvas,
            meta,
        })
    }

    pub fn original_dims(&self) -> (usize, usize) {
        (self.meta.orig_height, self.meta.orig_width)
    }
}

pub struct SupportView<'a> {
    pub id: &'a str,
    pub image: &'a RgbImage,
    pub clicks: &'a ClickMasks,
    pub prev: &'a Mask,
}

pub struct QueryView<'a> {
    pub id: &'a str,
    pub image: &'a RgbImage,
    pub prev: &'a Mask,
}

/// Canvas-resolution binary predictions, in input order.
#[derive(Clone, Debug, PartialEq)]
pub struct Segmentation {
    pub supports: Vec<Mask>,
    pub queries: Vec<Mask>,
}

/// Anything that turns support clicks into support and query masks.
pub trait Segmenter: Sync {
    fn segment(&self, supports: &[SupportView<'_>], queries: &[QueryView<'_>]) -> Result<Segmentation>;
}

impl Segmenter for Ifsenet {
    fn segment(&self, supports: &[SupportView<'_>], queries: &[QueryView<'_>]) -> Result<Segmentation> {
        let s: Vec<SupportInput<'_>> = supports
            .iter()
            .map(|v| SupportInput {
                image: v.image,
                clicks: v.clicks,
                prev: v.prev,
            })
            .collect();
        let q: Vec<QueryInput<'_>> = queries
            .iter()
            .map(|v| QueryInput {
                image: v.image,
                prev: v.prev,
            })
            .collect();
        let out = self.forward(&s, &q)?;
        Ok(Segmentation {
            supports: out
                .supports
                .iter()
                .map(|o| o.logits.binarize())
                .collect::<Result<_>>()?,
            queries: out
                .queries
                .iter()
                .map(|o| o.final_logits.binarize())
                .collect::<Result<_>>()?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct SupportEntry {
    pub image: PreparedImage,
    /// Original-resolution coordinates, in placement order.
    pub clicks: Vec<Click>,
    /// Canvas-resolution prediction, fed back as the previous mask.
    pub pred: Mask,
    /// A frozen entry still contributes to the support set but keeps its mask.
    pub frozen: bool,
}

#[derive(Clone, Debug)]
pub struct QueryEntry {
    pub image: PreparedImage,
    pub pred: Mask,
}

#[derive(Clone, Debug)]
pub struct Workspace {
    target: usize,
    radius: usize,
    supports: Vec<SupportEntry>,
    queries: Vec<QueryEntry>,
}

impl Workspace {
    /// Blank state: no clicks, empty previous masks everywhere.
    pub fn new(
        supports: Vec<PreparedImage>,
        queries: Vec<PreparedImage>,
        target: usize,
        radius: usize,
    ) -> Result<Self> {
        if supports.is_empty() {
            return Err(Error::InvalidInput("at least one support image is required".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for img in supports.iter().chain(&queries) {
            if img.meta.target != target {
                return Err(Error::Shape(format!("{} is not on a {target} canvas", img.id)));
            }
            if !seen.insert(img.id.clone()) {
                return Err(Error::InvalidInput(format!("duplicate image id {}", img.id)));
            }
        }
        Ok(Self {
            target,
            radius,
            supports: supports
                .into_iter()
                .map(|image| SupportEntry {
                    image,
                    clicks: Vec::new(),
                    pred: Mask::new(target, target),
                    frozen: false,
                })
                .collect(),
            queries: queries
                .into_iter()
                .map(|image| QueryEntry {
                    image,
                    pred: Mask::new(target, target),
                })
                .collect(),
        })
    }

    pub fn for_model(model: &Ifsenet, supports: Vec<PreparedImage>, queries: Vec<PreparedImage>) -> Result<Self> {
        let cfg = model.config();
        Self::new(supports, queries, cfg.input_patch, cfg.click_disk_radius)
    }

    pub fn target(&self) -> usize {
        self.target
    }

    pub fn supports(&self) -> &[SupportEntry] {
        &self.supports
    }

    pub fn queries(&self) -> &[QueryEntry] {
        &self.queries
    }

    pub fn support_index(&self, id: &str) -> Option<usize> {
        self.supports.iter().position(|e| e.image.id == id)
    }

    pub fn query_index(&self, id: &str) -> Option<usize> {
        self.queries.iter().position(|e| e.image.id == id)
    }

    /// Appends a click to a support image's history. Coordinates are checked
    /// against the original image size.
    pub fn add_click(&mut self, support: usize, row: i64, col: i64, polarity: Polarity) -> Result<Click> {
        let entry = self
            .supports
            .get_mut(support)
            .ok_or_else(|| Error::InvalidInput(format!("no support entry {support}")))?;
        let (h, w) = entry.image.original_dims();
        check_bounds(row, col, h, w)?;
        let click = Click::new(row as usize, col as usize, polarity, entry.clicks.len());
        entry.clicks.push(click);
        Ok(click)
    }

    pub fn freeze(&mut self, support: usize) {
        if let Some(e) = self.supports.get_mut(support) {
            e.frozen = true;
        }
    }

    /// Moves a query into the support set with an empty history, keeping its
    /// current mask as the previous mask. No forward pass is run.
    pub fn promote(&mut self, query: usize) -> Result<()> {
        if query >= self.queries.len() {
            return Err(Error::InvalidInput(format!("no query entry {query}")));
        }
        let q = self.queries.remove(query);
        self.supports.push(SupportEntry {
            image: q.image,
            clicks: Vec::new(),
            pred: q.pred,
            frozen: false,
        });
        Ok(())
    }

    /// Canvas click masks for one support entry.
    pub fn click_masks(&self, support: usize) -> Result<ClickMasks> {
        let e = &self.supports[support];
        let canvas: Vec<Click> = e
            .clicks
            .iter()
            .map(|c| {
                let (r, col) = e.image.meta.to_canvas(c.row, c.col);
                Click::new(r, col, c.polarity, c.order)
            })
            .collect();
        encode_clicks(&canvas, self.target, self.target, self.radius)
    }

    /// One forward over every entry using the carried masks; replaces every
    /// non-frozen mask.
    pub fn refresh(&mut self, segmenter: &dyn Segmenter) -> Result<()> {
        let clicks = (0..self.supports.len())
            .map(|i| self.click_masks(i))
            .collect::<Result<Vec<_>>>()?;
        let sv: Vec<SupportView<'_>> = self
            .supports
            .iter()
            .zip(&clicks)
            .map(|(e, c)| SupportView {
                id: &e.image.id,
                image: &e.image.canvas,
                clicks: c,
                prev: &e.pred,
            })
            .collect();
        let qv: Vec<QueryView<'_>> = self
            .queries
            .iter()
            .map(|e| QueryView {
                id: &e.image.id,
                image: &e.image.canvas,
                prev: &e.pred,
            })
            .collect();
        let seg = segmenter.segment(&sv, &qv)?;
        if seg.supports.len() != self.supports.len() || seg.queries.len() != self.queries.len() {
            return Err(Error::Shape("segmenter returned the wrong number of masks".into()));
        }
        let canvas = (self.target, self.target);
        if seg.supports.iter().chain(&seg.queries).any(|m| m.dims() != canvas) {
            return Err(Error::Shape("segmenter returned a non-canvas mask".into()));
        }
        for (e, m) in self.supports.iter_mut().zip(seg.supports) {
            if !e.frozen {
                e.pred = m;
            }
        }
        for (e, m) in self.queries.iter_mut().zip(seg.queries) {
            e.pred = m;
        }
        Ok(())
    }

    /// Support mask at original resolution.
    pub fn support_mask(&self, support: usize) -> Result<Mask> {
        let e = &self.supports[support];
        e.image.meta.unpad(&e.pred)
    }

    /// Query mask at original resolution.
    pub fn query_mask(&self, query: usize) -> Result<Mask> {
        let e = &self.queries[query];
        e.image.meta.unpad(&e.pred)
    }

    /// Original-resolution mask of any entry by id.
    pub fn mask_by_id(&self, id: &str) -> Option<Result<Mask>> {
        if let Some(i) = self.support_index(id) {
            return Some(self.support_mask(i));
        }
        self.query_index(id).map(|i| self.query_mask(i))
    }
}
