//! Procedurally generated corpus with the benchmark's label conventions, for
//! smoke tests, benchmarks and demos without the real datasets.

use std::collections::BTreeSet;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use std::path::Path;

use super::{read_manifest, write_manifest, DiskStore, ImageRecord, MemoryStore, Sample, SampleStore, Source};
use crate::error::Result;
use crate::mask::LabelMap;
use crate::rgb::{write_label_png, RgbImage};

/// Distinct base colour per class.
fn class_colour(class: u8) -> [f32; 3] {
    let hue = (class as f32 - 1.0) / 20.0;
    let h6 = hue * 6.0;
    let x = 1.0 - (h6 % 2.0 - 1.0).abs();
    let (r, g, b) = match h6 as u32 {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    let shade = if class % 2 == 0 { 0.55 } else { 0.9 };
    [r * shade, g * shade, b * shade]
}

#[derive(Clone, Debug)]
pub struct SyntheticSpec {
    pub images: usize,
    pub size: usize,
    pub classes: Vec<u8>,
    /// Probability that an image also contains a second, different class.
    pub second_object: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            images: 40,
            size: 64,
            classes: (1..=20).collect(),
            second_object: 0.3,
            seed: 0,
        }
    }
}

/// Image `i` has primary class `classes[i % len]`, drawn as a textured ellipse
/// on a noisy background.
pub fn generate(spec: &SyntheticSpec) -> MemoryStore {
    let mut store = MemoryStore::new();
    let s = spec.size;
    for i in 0..spec.images {
        let mut rng = ChaCha8Rng::seed_from_u64(crate::par::derive_seed(spec.seed, &[i as u64]));
        let mut image = RgbImage::zeros(s, s);
        for v in image.data.iter_mut() {
            *v = rng.random_range(0.25..0.45);
        }
        let mut labels = vec![0u8; s * s];
        let primary = spec.classes[i % spec.classes.len()];
        let mut objects = vec![primary];
        if spec.classes.len() > 1 && rng.random_bool(spec.second_object) {
            loop {
                let c = spec.classes[rng.random_range(0..spec.classes.len())];
                if c != primary {
                    objects.push(c);
                    break;
                }
            }
        }
        for (k, &class) in objects.iter().enumerate() {
            let scale = if k == 0 { 1.0 } else { 0.6 };
            let ry = rng.random_range(0.15..0.3) * s as f64 * scale;
            let rx = rng.random_range(0.15..0.3) * s as f64 * scale;
            let cy = rng.random_range(ry..s as f64 - ry);
            let cx = rng.random_range(rx..s as f64 - rx);
            let colour = class_colour(class);
            for r in 0..s {
                for c in 0..s {
                    let dy = (r as f64 + 0.5 - cy) / ry;
                    let dx = (c as f64 + 0.5 - cx) / rx;
                    if dy * dy + dx * dx <= 1.0 {
                        labels[r * s + c] = class;
                        let stripe = if (r + c) % 4 < 2 { 1.0 } else { 0.8 };
                        let px = image.pixel_mut(r, c);
                        for ch in 0..3 {
                            px[ch] = (colour[ch] * stripe + rng.random_range(-0.05..0.05))
                                .clamp(0.0, 1.0);
                        }
                    }
                }
            }
        }
        let labels = LabelMap::new(s, s, labels).expect("sized buffer");
        let classes_present: BTreeSet<u8> = labels.classes().into_iter().collect();
        let id = format!("syn_{i:05}");
        store.insert(
            ImageRecord {
                image_uri: PathBuf::from(format!("memory://{id}.png")),
                mask_uri: PathBuf::from(format!("memory://{id}_mask.png")),
                id,
                source: Source::Pascal,
                classes_present,
            },
            Sample::new(image, labels).expect("same dims"),
        );
    }
    store
}

/// Writes a store as `images/<id>.png`, `labels/<id>.png` and
/// `manifest.jsonl` (relative paths) under `dir`, and returns a disk-backed
/// store over the written files.
pub fn write_to_disk(store: &dyn SampleStore, dir: impl AsRef<Path>) -> Result<DiskStore> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("labels"))?;
    let mut records = Vec::with_capacity(store.records().len());
    for r in store.records() {
        let sample = store.load(&r.id)?;
        let image = PathBuf::from(format!("images/{}.png", r.id));
        let mask = PathBuf::from(format!("labels/{}.png", r.id));
        std::fs::write(dir.join(&image), sample.image.encode_png()?)?;
        write_label_png(dir.join(&mask), &sample.labels)?;
        records.push(ImageRecord {
            image_uri: image,
            mask_uri: mask,
            ..r.clone()
        });
    }
    let manifest = dir.join("manifest.jsonl");
    write_manifest(&manifest, &records)?;
    Ok(DiskStore::new(read_manifest(&manifest)?))
}
