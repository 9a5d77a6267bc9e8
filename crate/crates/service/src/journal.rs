//! Append-only per-session event log. Replaying it through the same model
//! rebuilds the session exactly, since inference is deterministic.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ifsenet::clicks::Polarity;
use ifsenet::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{ServiceError, ServiceResult};
use crate::session::{decode_mask_png, encode_mask_png, ClickRequest, IngestedImage, PromoteRequest, Session};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct StoredImage {
    pub id: String,
    /// File name of the PNG copy, relative to the session directory.
    pub file: String,
    pub gt_file: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Created {
        checkpoint_version: String,
        created_ms: u64,
        images: Vec<StoredImage>,
        support_ids: Vec<String>,
    },
    Click {
        image_id: String,
        row: i64,
        col: i64,
        polarity: Polarity,
        at_ms: u64,
    },
    Promote {
        image_id: String,
        at_ms: u64,
    },
}

pub struct Journal {
    dir: PathBuf,
}

fn io_err(e: impl std::fmt::Display) -> ServiceError {
    ServiceError::Internal(format!("journal: {e}"))
}

impl Journal {
    pub fn path(&self) -> PathBuf {
        self.dir.join("journal.jsonl")
    }

    /// Writes image copies and the creation event for a new session.
    pub fn create(
        root: &Path,
        session_id: &str,
        images: &[IngestedImage],
        support_ids: &[String],
        checkpoint_version: &str,
        created_ms: u64,
    ) -> ServiceResult<Self> {
        let dir = root.join(session_id);
        std::fs::create_dir_all(dir.join("images")).map_err(io_err)?;
        let mut stored = Vec::with_capacity(images.len());
        for (i, img) in images.iter().enumerate() {
            let file = format!("images/{i:04}.png");
            std::fs::write(dir.join(&file), img.image.encode_png()?).map_err(io_err)?;
            let gt_file = match &img.gt {
                Some(m) => {
                    let f = format!("images/{i:04}_gt.png");
                    std::fs::write(dir.join(&f), encode_mask_png(m)?).map_err(io_err)?;
                    Some(f)
                }
                None => None,
            };
            stored.push(StoredImage {
                id: img.id.clone(),
                file,
                gt_file,
            });
        }
        let journal = Self { dir };
        File::create(journal.path()).map_err(io_err)?;
        journal.append(&Event::Created {
            checkpoint_version: checkpoint_version.to_string(),
            created_ms,
            images: stored,
            support_ids: support_ids.to_vec(),
        })?;
        Ok(journal)
    }

    pub fn append(&self, event: &Event) -> ServiceResult<()> {
        let mut f = OpenOptions::new()
            .append(true)
            .open(self.path())
            .map_err(io_err)?;
        let mut line = serde_json::to_vec(event).map_err(io_err)?;
        line.push(b'\n');
        f.write_all(&line).map_err(io_err)?;
        f.sync_data().map_err(io_err)
    }

    pub fn open(dir: PathBuf) -> Self {
        Self { dir }
    }

    pub fn events(&self) -> ServiceResult<Vec<Event>> {
        let f = File::open(self.path()).map_err(io_err)?;
        BufReader::new(f)
            .lines()
            .filter(|l| l.as_ref().map_or(true, |s| !s.trim().is_empty()))
            .map(|l| serde_json::from_str(&l.map_err(io_err)?).map_err(io_err))
            .collect()
    }

    /// Rebuilds a session by re-running every recorded mutation.
    pub fn replay(
        &self,
        session_id: &str,
        segmenter: &dyn ifsenet::interactive::Segmenter,
        target: usize,
        click_radius: usize,
    ) -> ServiceResult<Session> {
        let mut events = self.events()?.into_iter();
        let Some(Event::Created {
            checkpoint_version,
            created_ms,
            images,
            support_ids,
        }) = events.next()
        else {
            return Err(io_err(format!("{session_id}: journal does not start with a creation event")));
        };
        let images = images
            .iter()
            .map(|s| {
                let bytes = std::fs::read(self.dir.join(&s.file)).map_err(io_err)?;
                let gt = match &s.gt_file {
                    Some(f) => Some(decode_mask_png(&std::fs::read(self.dir.join(f)).map_err(io_err)?)?),
                    None => None,
                };
                Ok(IngestedImage {
                    id: s.id.clone(),
                    image: RgbImage::decode(&bytes)?,
                    gt,
                })
            })
            .collect::<ServiceResult<Vec<_>>>()?;
        let mut session = Session::new(
            session_id.to_string(),
            checkpoint_version,
            images,
            &support_ids,
            target,
            click_radius,
            created_ms,
        )?;
        for ev in events {
            match ev {
                Event::Click {
                    image_id,
                    row,
                    col,
                    polarity,
                    at_ms,
                } => {
                    let req = ClickRequest {
                        image_id,
                        row,
                        col,
                        polarity,
                        expected_revision: session.revision,
                    };
                    session.add_click(&req, segmenter, at_ms)?;
                }
                Event::Promote { image_id, at_ms } => {
                    let req = PromoteRequest {
                        image_id,
                        expected_revision: session.revision,
                    };
                    session.promote(&req, at_ms)?;
                }
                Event::Created { .. } => return Err(io_err("duplicate creation event")),
            }
        }
        Ok(session)
    }
}
