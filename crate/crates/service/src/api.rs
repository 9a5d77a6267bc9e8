//! HTTP routes.

use std::collections::HashMap;
use std::path::{Component, Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::{DefaultBodyLimit, Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use ifsenet::model::Ifsenet;
use ifsenet::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{ServiceError, ServiceResult};
use crate::journal::{Event, Journal};
use crate::session::{
    decode_mask_png, encode_mask_png, now_ms, ClickRequest, IngestedImage, PromoteRequest, Session, SessionView, B64,
};

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    /// Server-side image directory that requests may reference.
    pub corpus: Option<PathBuf>,
    /// Where session journals live; `None` keeps sessions in memory only.
    pub state_dir: Option<PathBuf>,
    /// Per-image cap on encoded bytes, for uploads and corpus files alike.
    pub max_image_bytes: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            state_dir: None,
            max_image_bytes: 16 << 20,
        }
    }
}

struct Entry {
    session: Session,
    journal: Option<Journal>,
}

pub struct AppState {
    model: Arc<Ifsenet>,
    config: ServiceConfig,
    sessions: RwLock<HashMap<String, Arc<Mutex<Entry>>>>,
}

impl AppState {
    pub fn new(model: Ifsenet, config: ServiceConfig) -> Self {
        Self {
            model: Arc::new(model),
            config,
            sessions: RwLock::new(HashMap::new()),
        }
    }

    pub fn checkpoint_version(&self) -> &str {
        self.model.version()
    }

    pub fn session_count(&self) -> usize {
        self.sessions.read().unwrap().len()
    }

    /// Replays every journal under the state directory. Returns the number of
    /// sessions restored.
    pub fn restore(&self) -> ServiceResult<usize> {
        let Some(root) = &self.config.state_dir else {
            return Ok(0);
        };
        if !root.exists() {
            return Ok(0);
        }
        let cfg = self.model.config();
        let mut restored = 0;
        let entries = std::fs::read_dir(root).map_err(|e| ServiceError::Internal(e.to_string()))?;
        for dir in entries.flatten() {
            let path = dir.path();
            if !path.join("journal.jsonl").is_file() {
                continue;
            }
            let id = dir.file_name().to_string_lossy().into_owned();
            let journal = Journal::open(path);
            match journal.replay(&id, self.model.as_ref(), cfg.input_patch, cfg.click_disk_radius) {
                Ok(session) if session.checkpoint_version == self.checkpoint_version() => {
                    self.sessions.write().unwrap().insert(
                        id,
                        Arc::new(Mutex::new(Entry {
                            session,
                            journal: Some(journal),
                        })),
                    );
                    restored += 1;
                }
                Ok(session) => tracing::warn!(
                    session = %id,
                    version = %session.checkpoint_version,
                    "skipping session recorded with another checkpoint"
                ),
                Err(e) => tracing::warn!(session = %id, error = %e, "could not replay session"),
            }
        }
        Ok(restored)
    }

    fn entry(&self, id: &str) -> ServiceResult<Arc<Mutex<Entry>>> {
        self.sessions
            .read()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("no session {id}")))
    }

    fn read_capped(&self, bytes: Vec<u8>) -> ServiceResult<Vec<u8>> {
        if bytes.len() > self.config.max_image_bytes {
            return Err(ServiceError::TooLarge {
                size: bytes.len(),
                limit: self.config.max_image_bytes,
            });
        }
        Ok(bytes)
    }

    fn corpus_file(&self, rel: &str) -> ServiceResult<PathBuf> {
        let root = self
            .config
            .corpus
            .as_ref()
            .ok_or_else(|| ServiceError::BadRequest("no corpus directory is configured".into()))?;
        let rel = Path::new(rel);
        if !rel.components().all(|c| matches!(c, Component::Normal(_))) {
            return Err(ServiceError::BadRequest(format!(
                "corpus path {} must be relative and stay inside the corpus",
                rel.display()
            )));
        }
        Ok(root.join(rel))
    }

    fn fetch(&self, path: Option<&str>, data: Option<&str>, what: &str) -> ServiceResult<Vec<u8>> {
        match (path, data) {
            (Some(p), None) => {
                let file = self.corpus_file(p)?;
                let bytes = std::fs::read(&file)
                    .map_err(|_| ServiceError::NotFound(format!("corpus file {p} not found")))?;
                self.read_capped(bytes)
            }
            (None, Some(d)) => {
                // Reject oversize payloads before decoding the base64.
                if d.len() / 4 * 3 > self.config.max_image_bytes + 3 {
                    return Err(ServiceError::TooLarge {
                        size: d.len() / 4 * 3,
                        limit: self.config.max_image_bytes,
                    });
                }
                let bytes = B64
                    .decode(d)
                    .map_err(|e| ServiceError::BadRequest(format!("{what}: invalid base64: {e}")))?;
                self.read_capped(bytes)
            }
            _ => Err(ServiceError::BadRequest(format!(
                "{what}: give exactly one of a corpus path or inline data"
            ))),
        }
    }

    fn ingest(&self, spec: &ImageSpec) -> ServiceResult<IngestedImage> {
        let bytes = self.fetch(spec.path.as_deref(), spec.data.as_deref(), &spec.id)?;
        let image = RgbImage::decode(&bytes)?;
        let gt = if spec.mask_path.is_some() || spec.mask.is_some() {
            let b = self.fetch(spec.mask_path.as_deref(), spec.mask.as_deref(), &spec.id)?;
            Some(decode_mask_png(&b)?)
        } else {
            None
        };
        Ok(IngestedImage {
            id: spec.id.clone(),
            image,
            gt,
        })
    }

    pub fn create_session(&self, req: &CreateSession) -> ServiceResult<SessionView> {
        if let Some(v) = &req.checkpoint_version {
            if v != self.checkpoint_version() {
                return Err(ServiceError::NotFound(format!(
                    "checkpoint {v} is not loaded (serving {})",
                    self.checkpoint_version()
                )));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for img in &req.images {
            if !seen.insert(&img.id) {
                return Err(ServiceError::Unprocessable(format!("duplicate image id {}", img.id)));
            }
        }
        let images = req
            .images
            .iter()
            .map(|s| self.ingest(s))
            .collect::<ServiceResult<Vec<_>>>()?;
        let id = uuid::Uuid::new_v4().simple().to_string();
        let created = now_ms();
        let cfg = self.model.config();
        let session = Session::new(
            id.clone(),
            self.checkpoint_version().to_string(),
            images.clone(),
            &req.support_ids,
            cfg.input_patch,
            cfg.click_disk_radius,
            created,
        )?;
        let journal = match &self.config.state_dir {
            Some(root) => Some(Journal::create(
                root,
                &id,
                &images,
                &req.support_ids,
                &session.checkpoint_version,
                created,
            )?),
            None => None,
        };
        let view = session.view()?;
        self.sessions
            .write()
            .unwrap()
            .insert(id, Arc::new(Mutex::new(Entry { session, journal })));
        Ok(view)
    }

    pub fn get_session(&self, id: &str) -> ServiceResult<SessionView> {
        let entry = self.entry(id)?;
        let guard = entry.lock().unwrap();
        guard.session.view()
    }

    pub fn add_click(&self, id: &str, req: &ClickRequest) -> ServiceResult<SessionView> {
        let entry = self.entry(id)?;
        let mut guard = entry.lock().unwrap();
        let at = now_ms();
        // Journal first: if the append fails the click is not applied.
        let mut trial = guard.session.clone();
        trial.add_click(req, self.model.as_ref(), at)?;
        if let Some(j) = &guard.journal {
            j.append(&Event::Click {
                image_id: req.image_id.clone(),
                row: req.row,
                col: req.col,
                polarity: req.polarity,
                at_ms: at,
            })?;
        }
        guard.session = trial;
        guard.session.view()
    }

    pub fn promote(&self, id: &str, req: &PromoteRequest) -> ServiceResult<SessionView> {
        let entry = self.entry(id)?;
        let mut guard = entry.lock().unwrap();
        let at = now_ms();
        let mut trial = guard.session.clone();
        trial.promote(req, at)?;
        if let Some(j) = &guard.journal {
            j.append(&Event::Promote {
                image_id: req.image_id.clone(),
                at_ms: at,
            })?;
        }
        guard.session = trial;
        guard.session.view()
    }

    pub fn mask_png(&self, id: &str, image_id: &str) -> ServiceResult<(u64, Vec<u8>)> {
        let entry = self.entry(id)?;
        let guard = entry.lock().unwrap();
        let mask = guard.session.mask(image_id)?;
        Ok((guard.session.revision, encode_mask_png(&mask)?))
    }
}

/// One image of a creation request: a corpus path or inline base64 bytes,
/// plus an optional ground-truth mask given the same way.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ImageSpec {
    pub id: String,
    #[serde(default)]
    pub path: Option<String>,
    #[serde(default)]
    pub data: Option<String>,
    #[serde(default)]
    pub mask_path: Option<String>,
    #[serde(default)]
    pub mask: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CreateSession {
    pub images: Vec<ImageSpec>,
    pub support_ids: Vec<String>,
    #[serde(default)]
    pub checkpoint_version: Option<String>,
}

/// Runs CPU-bound session work off the async executor.
async fn blocking<T, F>(f: F) -> ServiceResult<T>
where
    T: Send + 'static,
    F: FnOnce() -> ServiceResult<T> + Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ServiceError::Internal(format!("worker failed: {e}")))?
}

async fn create(State(st): State<Arc<AppState>>, Json(req): Json<CreateSession>) -> ServiceResult<Response> {
    let view = blocking(move || st.create_session(&req)).await?;
    Ok((StatusCode::CREATED, Json(view)).into_response())
}

async fn show(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ServiceResult<Json<SessionView>> {
    Ok(Json(blocking(move || st.get_session(&id)).await?))
}

async fn click(
    State(st): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<ClickRequest>,
) -> ServiceResult<Json<SessionView>> {
    Ok(Json(blocking(move || st.add_click(&id, &req)).await?))
}

async fn promote(
    State(st): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<PromoteRequest>,
) -> ServiceResult<Json<SessionView>> {
    Ok(Json(blocking(move || st.promote(&id, &req)).await?))
}

async fn mask(
    State(st): State<Arc<AppState>>,
    UrlPath((id, image_id)): UrlPath<(String, String)>,
) -> ServiceResult<Response> {
    let (revision, png) = blocking(move || st.mask_png(&id, &image_id)).await?;
    Ok((
        [
            (header::CONTENT_TYPE, "image/png".to_string()),
            (header::HeaderName::from_static("x-revision"), revision.to_string()),
        ],
        png,
    )
        .into_response())
}

async fn health(State(st): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(serde_json::json!({
        "status": "ok",
        "checkpoint_version": st.checkpoint_version(),
        "sessions": st.session_count(),
    }))
}

pub fn router(state: Arc<AppState>) -> Router {
    // Inline uploads are base64, so allow a third more than the raw image cap
    // for each of a generous number of images.
    let body_limit = state.config.max_image_bytes.saturating_mul(4) / 3 * 16 + (1 << 20);
    Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create))
        .route("/sessions/:id", get(show))
        .route("/sessions/:id/clicks", post(click))
        .route("/sessions/:id/promotions", post(promote))
        .route("/sessions/:id/masks/:image_id", get(mask))
        .layer(DefaultBodyLimit::max(body_limit))
        .with_state(state)
}
