//! Fold partition, merge priority and the gated canonical count.

use std::collections::BTreeSet;
use std::path::Path;

use ifsenet::dataset::synthetic::{generate, SyntheticSpec};
use ifsenet::dataset::{build_merged_index, fold_split, DiskStore, SampleStore, Source, NUM_FOLDS};
use ifsenet::model::{Ifsenet, ModelConfig};
use ifsenet::rgb::write_label_png;
use ifsenet::trainer::{TrainConfig, Trainer};
use ifsenet::{LabelMap, RgbImage};

use crate::common::{ensure, err, rng, Outcome};

pub const CANONICAL_COUNT: usize = 12_031;

fn check_folds() -> Outcome {
    let all: BTreeSet<u8> = (1..=20).collect();
    let mut val_union = BTreeSet::new();
    for fold in 0..NUM_FOLDS {
        let f = fold_split(fold).map_err(err)?;
        let val: BTreeSet<u8> = f.val_classes.iter().copied().collect();
        let train: BTreeSet<u8> = f.train_classes.iter().copied().collect();
        ensure!(val.len() == 5 && train.len() == 15, "fold {fold}: {} val, {} train", val.len(), train.len());
        ensure!(val.is_disjoint(&train), "fold {fold}: val and train overlap");
        ensure!(&val | &train == all, "fold {fold}: classes missing");
        let want: BTreeSet<u8> = (5 * fold as u8 + 1..=5 * fold as u8 + 5).collect();
        ensure!(val == want, "fold {fold}: val classes {val:?}");
        ensure!(val_union.is_disjoint(&val), "fold {fold}: val classes reused");
        val_union.extend(val);
    }
    ensure!(val_union == all, "validation classes do not cover 1..=20");
    ensure!(fold_split(NUM_FOLDS).is_err(), "fold {NUM_FOLDS} accepted");

    // Training never targets a validation class, even on images containing one.
    let store = generate(&SyntheticSpec {
        images: 40,
        size: 32,
        classes: (1..=20).collect(),
        second_object: 0.8,
        seed: 6,
    });
    let model = Ifsenet::new(ModelConfig::tiny(8, vec![4], 32), 0).map_err(err)?;
    let mut visits = 0;
    for fold in 0..NUM_FOLDS {
        let f = fold_split(fold).map_err(err)?;
        let trainer = Trainer::new(&model, &store, f.clone(), TrainConfig::default()).map_err(err)?;
        for rec in store.records() {
            let listed = trainer.train_ids().contains(&rec.id);
            let has_train = rec.classes_present.iter().any(|&c| f.is_train(c));
            ensure!(listed == has_train, "fold {fold}: {} listed={listed}", rec.id);
        }
        let mut r = rng(50 + fold as u64);
        for id in trainer.train_ids() {
            let s = trainer.prepare(id, &mut r).map_err(err)?;
            ensure!(f.is_train(s.class()), "fold {fold}: visit of {id} chose class {}", s.class());
            for sid in s.support_ids() {
                ensure!(sid != id, "query reused as support");
                ensure!(store.record(sid).unwrap().has_class(s.class()), "support {sid} lacks the class");
            }
            visits += 1;
        }
    }
    Ok(format!("4 folds partition 1..=20; {visits} training visits all on training classes"))
}

fn write_pair(image_dir: &Path, mask_dir: &Path, id: &str, labels: &LabelMap) -> Result<(), String> {
    let img = RgbImage::zeros(labels.height, labels.width);
    img.to_rgb8().save(image_dir.join(format!("{id}.jpg"))).map_err(err)?;
    write_label_png(mask_dir.join(format!("{id}.png")), labels).map_err(err)
}

fn filled(class: u8, void_border: bool) -> LabelMap {
    let (h, w) = (12, 10);
    let data = (0..h * w)
        .map(|i| {
            let (r, c) = (i / w, i % w);
            if void_border && (r == 0 || c == 0) {
                255
            } else if (3..9).contains(&r) && (2..8).contains(&c) {
                class
            } else {
                0
            }
        })
        .collect();
    LabelMap::new(h, w, data).unwrap()
}

fn check_merge() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let pascal = dir.path().join("voc");
    let sbd = dir.path().join("sbd");
    let dirs = [
        pascal.join("JPEGImages"),
        pascal.join("SegmentationClass"),
        sbd.join("img"),
        sbd.join("cls"),
    ];
    for d in &dirs {
        std::fs::create_dir_all(d).map_err(err)?;
    }
    // Pascal: p1, p2, both1, both2. SBD: both1, both2, s1, s2.
    for (id, class) in [("p1", 1), ("p2", 2), ("both1", 3), ("both2", 4)] {
        write_pair(&dirs[0], &dirs[1], id, &filled(class, true))?;
    }
    for (id, class) in [("both1", 13), ("both2", 14), ("s1", 15), ("s2", 16)] {
        write_pair(&dirs[2], &dirs[3], id, &filled(class, false))?;
    }
    let index = build_merged_index(&pascal, &sbd).map_err(err)?;
    ensure!(index.records.len() == 6, "{} records from 6 distinct ids", index.records.len());
    let ids: Vec<&str> = index.records.iter().map(|r| r.id.as_str()).collect();
    ensure!(ids == ["both1", "both2", "p1", "p2", "s1", "s2"], "ids {ids:?}");
    let store = DiskStore::new(index.records.clone());
    for rec in &index.records {
        let want_source = if rec.id.starts_with('p') { Source::Pascal } else { Source::Sbd };
        ensure!(rec.source == want_source, "{} from {:?}", rec.id, rec.source);
        let labels = store.load(&rec.id).map_err(err)?.labels;
        let classes: BTreeSet<u8> = labels.classes().into_iter().filter(|&c| c <= 20).collect();
        ensure!(classes == rec.classes_present, "{}: record {:?} vs mask {classes:?}", rec.id, rec.classes_present);
    }
    let both1 = index.records.iter().find(|r| r.id == "both1").unwrap();
    ensure!(
        both1.classes_present == [13].into() && both1.mask_uri.starts_with(&sbd),
        "shared id kept the Pascal mask"
    );
    Ok("6-image fixture: SBD mask wins for both shared ids".into())
}

fn check_canonical() -> Outcome {
    let (Ok(pascal), Ok(sbd)) = (std::env::var("IFSENET_PASCAL_ROOT"), std::env::var("IFSENET_SBD_ROOT")) else {
        return Ok("canonical count SKIPPED (set IFSENET_PASCAL_ROOT and IFSENET_SBD_ROOT)".into());
    };
    let index = build_merged_index(pascal, sbd).map_err(err)?;
    ensure!(
        index.records.len() == CANONICAL_COUNT,
        "{} records, expected {CANONICAL_COUNT}",
        index.records.len()
    );
    Ok(format!("canonical corpus has {CANONICAL_COUNT} records"))
}

pub fn run() -> Outcome {
    let parts = [check_folds(), check_merge(), check_canonical()];
    let mut details = Vec::new();
    for p in parts {
        details.push(p?);
    }
    Ok(details.join("; "))
}
