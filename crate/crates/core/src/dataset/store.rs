//! Access to decoded images and label maps by record id.

use std::collections::HashMap;

use super::ImageRecord;
use crate::error::{Error, Result};
use crate::mask::LabelMap;
use crate::rgb::{read_label_png, RgbImage};

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: RgbImage,
    pub labels: LabelMap,
}

impl Sample {
    pub fn new(image: RgbImage, labels: LabelMap) -> Result<Self> {
        if (image.height, image.width) != (labels.height, labels.width) {
            return Err(Error::Shape(format!(
                "image {}x{} vs mask {}x{}",
                image.height, image.width, labels.height, labels.width
            )));
        }
        Ok(Self { image, labels })
    }
}

/// Read-only record source shared by training workers and evaluators.
pub trait SampleStore: Send + Sync {
    fn records(&self) -> &[ImageRecord];
    fn load(&self, id: &str) -> Result<Sample>;

    fn record(&self, id: &str) -> Option<&ImageRecord> {
        self.records().iter().find(|r| r.id == id)
    }
}

/// Decodes files named by the records on every load.
pub struct DiskStore {
    records: Vec<ImageRecord>,
    by_id: HashMap<String, usize>,
}

impl DiskStore {
    pub fn new(records: Vec<ImageRecord>) -> Self {
        let by_id = records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.id.clone(), i))
            .collect();
        Self { records, by_id }
    }
}

impl SampleStore for DiskStore {
    fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    fn record(&self, id: &str) -> Option<&ImageRecord> {
        self.by_id.get(id).map(|&i| &self.records[i])
    }

    fn load(&self, id: &str) -> Result<Sample> {
        let rec = self
            .record(id)
            .ok_or_else(|| Error::Dataset(format!("unknown record {id}")))?;
        Sample::new(RgbImage::open(&rec.image_uri)?, read_label_png(&rec.mask_uri)?)
    }
}

/// Fully in-memory store.
#[derive(Clone, Default)]
pub struct MemoryStore {
    records: Vec<ImageRecord>,
    samples: HashMap<String, Sample>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, record: ImageRecord, sample: Sample) {
        self.samples.insert(record.id.clone(), sample);
        self.records.push(record);
    }

    /// Keeps only records accepted by `keep`.
    pub fn filtered(&self, keep: impl Fn(&ImageRecord) -> bool) -> MemoryStore {
        let mut out = MemoryStore::new();
        for r in self.records.iter().filter(|r| keep(r)) {
            out.insert(r.clone(), self.samples[&r.id].clone());
        }
        out
    }
}

impl SampleStore for MemoryStore {
    fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    fn load(&self, id: &str) -> Result<Sample> {
        self.samples
            .get(id)
            .cloned()
            .ok_or_else(|| Error::Dataset(format!("unknown record {id}")))
    }
}
