//! Session state and its mutations, independent of HTTP.

use std::collections::HashMap;

use base64::Engine;
use ifsenet::clicks::{Click, Polarity};
use ifsenet::eval::iou;
use ifsenet::interactive::{PreparedImage, Segmenter, Workspace};
use ifsenet::rgb::{decode_gray_png, encode_gray_png};
use ifsenet::{Mask, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{ServiceError, ServiceResult};

pub const B64: base64::engine::GeneralPurpose = base64::engine::general_purpose::STANDARD;

/// A decoded image ready to enter a session.
#[derive(Clone, Debug)]
pub struct IngestedImage {
    pub id: String,
    pub image: RgbImage,
    /// Optional ground truth, enabling per-image IoU in snapshots.
    pub gt: Option<Mask>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ClickRequest {
    pub image_id: String,
    pub row: i64,
    pub col: i64,
    pub polarity: Polarity,
    pub expected_revision: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PromoteRequest {
    pub image_id: String,
    pub expected_revision: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SupportView {
    pub image_id: String,
    pub height: usize,
    pub width: usize,
    pub clicks: Vec<Click>,
    /// Base64 single-channel PNG, 0 = background, 255 = foreground.
    pub mask_png: String,
    pub iou: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct QueryView {
    pub image_id: String,
    pub height: usize,
    pub width: usize,
    pub mask_png: String,
    pub iou: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SessionView {
    pub id: String,
    pub checkpoint_version: String,
    pub revision: u64,
    pub created_ms: u64,
    pub updated_ms: u64,
    pub supports: Vec<SupportView>,
    pub queries: Vec<QueryView>,
}

pub fn now_ms() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

pub fn encode_mask_png(mask: &Mask) -> ServiceResult<Vec<u8>> {
    Ok(encode_gray_png(mask.height(), mask.width(), &mask.to_gray8())?)
}

pub fn decode_mask_png(bytes: &[u8]) -> ServiceResult<Mask> {
    let (h, w, gray) = decode_gray_png(bytes)?;
    Ok(Mask::from_gray8(h, w, &gray)?)
}

#[derive(Clone, Debug)]
pub struct Session {
    pub id: String,
    pub checkpoint_version: String,
    pub revision: u64,
    pub created_ms: u64,
    pub updated_ms: u64,
    workspace: Workspace,
    gt: HashMap<String, Mask>,
}

impl Session {
    /// Blank session; no forward pass is run.
    pub fn new(
        id: String,
        checkpoint_version: String,
        images: Vec<IngestedImage>,
        support_ids: &[String],
        target: usize,
        click_radius: usize,
        created_ms: u64,
    ) -> ServiceResult<Self> {
        if support_ids.is_empty() {
            return Err(ServiceError::Unprocessable("support set is empty".into()));
        }
        for sid in support_ids {
            if !images.iter().any(|i| &i.id == sid) {
                return Err(ServiceError::Unprocessable(format!(
                    "support id {sid} is not among the images"
                )));
            }
        }
        let mut gt = HashMap::new();
        let mut supports = Vec::new();
        let mut queries = Vec::new();
        for img in images {
            if let Some(m) = &img.gt {
                if m.dims() != (img.image.height, img.image.width) {
                    return Err(ServiceError::Unprocessable(format!(
                        "ground truth for {} does not match the image size",
                        img.id
                    )));
                }
            }
            let prepared = PreparedImage::new(img.id.clone(), &img.image, target)?;
            if let Some(m) = img.gt {
                gt.insert(img.id.clone(), m);
            }
            if support_ids.contains(&img.id) {
                supports.push(prepared);
            } else {
                queries.push(prepared);
            }
        }
        // Keep the caller's support order.
        supports.sort_by_key(|p| support_ids.iter().position(|s| *s == p.id));
        let workspace = Workspace::new(supports, queries, target, click_radius)
            .map_err(|e| ServiceError::Unprocessable(e.to_string()))?;
        Ok(Self {
            id,
            checkpoint_version,
            revision: 0,
            created_ms,
            updated_ms: created_ms,
            workspace,
            gt,
        })
    }

    pub fn workspace(&self) -> &Workspace {
        &self.workspace
    }

    fn check_revision(&self, expected: u64) -> ServiceResult<()> {
        if expected != self.revision {
            return Err(ServiceError::Conflict {
                expected,
                current: self.revision,
            });
        }
        Ok(())
    }

    /// Appends a click and re-segments every image. All-or-nothing: on any
    /// failure the session is unchanged.
    pub fn add_click(&mut self, req: &ClickRequest, segmenter: &dyn Segmenter, at_ms: u64) -> ServiceResult<Click> {
        self.check_revision(req.expected_revision)?;
        let idx = match self.workspace.support_index(&req.image_id) {
            Some(i) => i,
            None if self.workspace.query_index(&req.image_id).is_some() => {
                return Err(ServiceError::Unprocessable(format!(
                    "{} is a query image; promote it before clicking",
                    req.image_id
                )))
            }
            None => return Err(ServiceError::NotFound(format!("no image {}", req.image_id))),
        };
        let mut next = self.workspace.clone();
        let click = next.add_click(idx, req.row, req.col, req.polarity)?;
        next.refresh(segmenter)?;
        self.workspace = next;
        self.revision += 1;
        self.updated_ms = at_ms;
        Ok(click)
    }

    /// Moves a query into the support set. Masks are left untouched.
    pub fn promote(&mut self, req: &PromoteRequest, at_ms: u64) -> ServiceResult<()> {
        self.check_revision(req.expected_revision)?;
        let idx = match self.workspace.query_index(&req.image_id) {
            Some(i) => i,
            None if self.workspace.support_index(&req.image_id).is_some() => {
                return Err(ServiceError::Unprocessable(format!(
                    "{} is already a support image",
                    req.image_id
                )))
            }
            None => return Err(ServiceError::NotFound(format!("no image {}", req.image_id))),
        };
        self.workspace.promote(idx)?;
        self.revision += 1;
        self.updated_ms = at_ms;
        Ok(())
    }

    /// Original-resolution mask of an image.
    pub fn mask(&self, image_id: &str) -> ServiceResult<Mask> {
        self.workspace
            .mask_by_id(image_id)
            .ok_or_else(|| ServiceError::NotFound(format!("no image {image_id}")))?
            .map_err(ServiceError::from)
    }

    fn iou_of(&self, id: &str, mask: &Mask) -> ServiceResult<Option<f64>> {
        self.gt.get(id).map(|g| iou(mask, g)).transpose().map_err(Into::into)
    }

    pub fn view(&self) -> ServiceResult<SessionView> {
        let ws = &self.workspace;
        let supports = ws
            .supports()
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let m = ws.support_mask(i)?;
                let (height, width) = e.image.original_dims();
                Ok(SupportView {
                    image_id: e.image.id.clone(),
                    height,
                    width,
                    clicks: e.clicks.clone(),
                    mask_png: B64.encode(encode_mask_png(&m)?),
                    iou: self.iou_of(&e.image.id, &m)?,
                })
            })
            .collect::<ServiceResult<Vec<_>>>()?;
        let queries = ws
            .queries()
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let m = ws.query_mask(i)?;
                let (height, width) = e.image.original_dims();
                Ok(QueryView {
                    image_id: e.image.id.clone(),
                    height,
                    width,
                    mask_png: B64.encode(encode_mask_png(&m)?),
                    iou: self.iou_of(&e.image.id, &m)?,
                })
            })
            .collect::<ServiceResult<Vec<_>>>()?;
        Ok(SessionView {
            id: self.id.clone(),
            checkpoint_version: self.checkpoint_version.clone(),
            revision: self.revision,
            created_ms: self.created_ms,
            updated_ms: self.updated_ms,
            supports,
            queries,
        })
    }
}
