//! Building and caching the merged record index.
//!
//! Expected layouts:
//!
//! ```text
//! <pascal_root>/JPEGImages/<id>.jpg
//! <pascal_root>/SegmentationClass/<id>.png      palette-indexed labels
//! <sbd_root>/img/<id>.jpg
//! <sbd_root>/cls/<id>.png                        8-bit labels (converted from cls/<id>.mat)
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ImageRecord, Source, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::rgb::read_label_png;

#[derive(Clone, Debug, Default)]
pub struct MergedIndex {
    pub records: Vec<ImageRecord>,
    /// Masks that could not be decoded, or carried no benchmark class.
    pub skipped: usize,
}

fn list_ids(dir: &Path, ext: &str) -> Result<BTreeSet<String>> {
    let mut ids = BTreeSet::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) == Some(ext) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.insert(stem.to_string());
            }
        }
    }
    Ok(ids)
}

fn require_dir(path: &Path) -> Result<()> {
    if !path.is_dir() {
        return Err(Error::Dataset(format!("missing directory {}", path.display())));
    }
    Ok(())
}

/// Union of the annotated images of both datasets; SBD masks win for ids
/// present in both. Records are sorted by id.
pub fn build_merged_index(pascal_root: impl AsRef<Path>, sbd_root: impl AsRef<Path>) -> Result<MergedIndex> {
    let pascal_root = pascal_root.as_ref();
    let sbd_root = sbd_root.as_ref();
    for dir in [
        pascal_root.join("JPEGImages"),
        pascal_root.join("SegmentationClass"),
        sbd_root.join("img"),
        sbd_root.join("cls"),
    ] {
        require_dir(&dir)?;
    }
    let mut chosen: BTreeMap<String, (Source, PathBuf, PathBuf)> = BTreeMap::new();
    for id in list_ids(&pascal_root.join("SegmentationClass"), "png")? {
        chosen.insert(
            id.clone(),
            (
                Source::Pascal,
                pascal_root.join("JPEGImages").join(format!("{id}.jpg")),
                pascal_root.join("SegmentationClass").join(format!("{id}.png")),
            ),
        );
    }
    for id in list_ids(&sbd_root.join("cls"), "png")? {
        chosen.insert(
            id.clone(),
            (
                Source::Sbd,
                sbd_root.join("img").join(format!("{id}.jpg")),
                sbd_root.join("cls").join(format!("{id}.png")),
            ),
        );
    }
    let mut index = MergedIndex::default();
    for (id, (source, image_uri, mask_uri)) in chosen {
        let classes: BTreeSet<u8> = match read_label_png(&mask_uri) {
            Ok(labels) => labels
                .classes()
                .into_iter()
                .filter(|&c| c <= NUM_CLASSES)
                .collect(),
            Err(e) => {
                tracing::warn!("skipping {}: {e}", mask_uri.display());
                index.skipped += 1;
                continue;
            }
        };
        if classes.is_empty() {
            index.skipped += 1;
            continue;
        }
        index.records.push(ImageRecord {
            id,
            image_uri,
            mask_uri,
            source,
            classes_present: classes,
        });
    }
    if index.skipped > 0 {
        tracing::info!("{} masks skipped while indexing", index.skipped);
    }
    Ok(index)
}

#[derive(Serialize, Deserialize)]
struct ManifestLine {
    id: String,
    source: Source,
    image: PathBuf,
    mask: PathBuf,
    classes: Vec<u8>,
}

/// One JSON object per line: id, source, image, mask, classes.
pub fn write_manifest(path: impl AsRef<Path>, records: &[ImageRecord]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(
            &mut out,
            &ManifestLine {
                id: r.id.clone(),
                source: r.source,
                image: r.image_uri.clone(),
                mask: r.mask_uri.clone(),
                classes: r.classes_present.iter().copied().collect(),
            },
        )?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Relative image and mask paths are resolved against the manifest's directory.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ImageRecord>> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
    let resolve = |p: PathBuf| if p.is_relative() { base.join(p) } else { p };
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut records = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let m: ManifestLine = serde_json::from_str(&line)?;
        records.push(ImageRecord {
            id: m.id,
            source: m.source,
            image_uri: resolve(m.image),
            mask_uri: resolve(m.mask),
            classes_present: m.classes.into_iter().collect(),
        });
    }
    Ok(records)
}
