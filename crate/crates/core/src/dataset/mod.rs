//! Merged Pascal VOC + SBD corpus, fold splits and sampling.

pub mod augment;
pub mod index;
pub mod store;
pub mod synthetic;

use std::collections::{BTreeSet, HashSet};
use std::path::PathBuf;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use augment::{augment, resize_with_aspect_pad, AugmentParams, GeometricTransform, PadMeta};
pub use index::{build_merged_index, read_manifest, write_manifest, MergedIndex};
pub use store::{DiskStore, MemoryStore, Sample, SampleStore};

use crate::error::{Error, Result};
use crate::mask::{LabelMap, Mask};

/// The 20 benchmark classes in canonical (alphabetical) order; class id `i`
/// is `CLASS_NAMES[i - 1]`.
pub const CLASS_NAMES: [&str; 20] = [
    "aeroplane",
    "bicycle",
    "bird",
    "boat",
    "bottle",
    "bus",
    "car",
    "cat",
    "chair",
    "cow",
    "diningtable",
    "dog",
    "horse",
    "motorbike",
    "person",
    "pottedplant",
    "sheep",
    "sofa",
    "train",
    "tvmonitor",
];

pub const NUM_CLASSES: u8 = 20;
pub const NUM_FOLDS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Pascal,
    Sbd,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub image_uri: PathBuf,
    pub mask_uri: PathBuf,
    pub source: Source,
    pub classes_present: BTreeSet<u8>,
}

impl ImageRecord {
    pub fn has_class(&self, class: u8) -> bool {
        self.classes_present.contains(&class)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSpec {
    pub fold: usize,
    pub val_classes: Vec<u8>,
    pub train_classes: Vec<u8>,
}

impl FoldSpec {
    pub fn is_val(&self, class: u8) -> bool {
        self.val_classes.contains(&class)
    }

    pub fn is_train(&self, class: u8) -> bool {
        self.train_classes.contains(&class)
    }

    /// Records containing at least one training class.
    pub fn train_records<'a>(&self, records: &'a [ImageRecord]) -> Vec<&'a ImageRecord> {
        records
            .iter()
            .filter(|r| r.classes_present.iter().any(|&c| self.is_train(c)))
            .collect()
    }

    /// Records containing at least one validation class.
    pub fn val_records<'a>(&self, records: &'a [ImageRecord]) -> Vec<&'a ImageRecord> {
        records
            .iter()
            .filter(|r| r.classes_present.iter().any(|&c| self.is_val(c)))
            .collect()
    }
}

/// Fold `i` validates on classes `5i+1 ..= 5i+5` and trains on the other 15.
pub fn fold_split(fold: usize) -> Result<FoldSpec> {
    if fold >= NUM_FOLDS {
        return Err(Error::InvalidInput(format!(
            "fold {fold} out of range 0..{NUM_FOLDS}"
        )));
    }
    let lo = 5 * fold as u8 + 1;
    let val_classes: Vec<u8> = (lo..lo + 5).collect();
    let train_classes = (1..=NUM_CLASSES)
        .filter(|c| !val_classes.contains(c))
        .collect();
    Ok(FoldSpec {
        fold,
        val_classes,
        train_classes,
    })
}

/// Binary mask of `class`; void pixels count as background.
pub fn binarize_mask(record: &ImageRecord, labels: &LabelMap, class: u8) -> Result<Mask> {
    if !record.has_class(class) {
        return Err(Error::ClassAbsent {
            id: record.id.clone(),
            class,
        });
    }
    Ok(labels.class_mask(class))
}

/// Uniformly samples `k` distinct records containing `class`, skipping `exclude`.
pub fn sample_support<'a, R: Rng + ?Sized>(
    records: &'a [ImageRecord],
    class: u8,
    k: usize,
    exclude: &HashSet<String>,
    rng: &mut R,
) -> Result<Vec<&'a ImageRecord>> {
    let eligible: Vec<&ImageRecord> = records
        .iter()
        .filter(|r| r.has_class(class) && !exclude.contains(&r.id))
        .collect();
    if eligible.len() < k {
        return Err(Error::InsufficientRecords {
            class,
            needed: k,
            found: eligible.len(),
        });
    }
    Ok(eligible.choose_multiple(rng, k).copied().collect())
}

/// One validation episode: a class, disjoint support and query ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub class_chosen: u8,
    pub support_ids: Vec<String>,
    pub query_ids: Vec<String>,
    pub seed: u64,
}

impl EpisodeSpec {
    /// Checks disjointness and that every listed image contains the class.
    pub fn new(
        class_chosen: u8,
        support_ids: Vec<String>,
        query_ids: Vec<String>,
        seed: u64,
        records: &[ImageRecord],
    ) -> Result<Self> {
        if support_ids.is_empty() {
            return Err(Error::InvalidInput("episode needs a support image".into()));
        }
        let mut seen = HashSet::new();
        for id in support_ids.iter().chain(&query_ids) {
            if !seen.insert(id.as_str()) {
                return Err(Error::InvalidInput(format!(
                    "image {id} appears twice in the episode"
                )));
            }
            let rec = records
                .iter()
                .find(|r| &r.id == id)
                .ok_or_else(|| Error::Dataset(format!("unknown record {id}")))?;
            if !rec.has_class(class_chosen) {
                return Err(Error::ClassAbsent {
                    id: id.clone(),
                    class: class_chosen,
                });
            }
        }
        Ok(Self {
            class_chosen,
            support_ids,
            query_ids,
            seed,
        })
    }

    /// Draws `s` supports and `q` queries containing `class`.
    pub fn sample<R: Rng + ?Sized>(
        records: &[ImageRecord],
        class: u8,
        s: usize,
        q: usize,
        seed: u64,
        rng: &mut R,
    ) -> Result<Self> {
        let picked = sample_support(records, class, s + q, &HashSet::new(), rng)?;
        let ids: Vec<String> = picked.iter().map(|r| r.id.clone()).collect();
        let (sup, qry) = ids.split_at(s);
        Self::new(class, sup.to_vec(), qry.to_vec(), seed, records)
    }
}
