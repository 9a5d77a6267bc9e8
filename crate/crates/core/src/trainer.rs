//! Iterative episodic training.
//!
//! Each training image is visited once per epoch as the query. Predictions
//! and click masks from earlier visits of the same (image, class) are carried
//! over, or reset to blank with probability `1 - carry_prob`, so the network
//! learns to refine its own previous output as clicks accumulate.

use std::collections::{HashMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clicks::{sample_training_click, Click, ClickMasks, RegionWeights, TrainingRegions};
use crate::dataset::{
    binarize_mask, sample_support, AugmentParams, FoldSpec, GeometricTransform, ImageRecord,
    SampleStore,
};
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::model::{checkpoint, compute_loss, Ifsenet, ParamStore, QueryInput, SupportInput};
use crate::par::{derive_seed, Execution};
use crate::rgb::RgbImage;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub carry_prob: f64,
    pub k_shots: usize,
    pub seed: u64,
    pub border_width: usize,
    pub region_weights: RegionWeights,
    /// Apply flip/rotation/crop; when off, images are centre-cropped/padded.
    pub augment: bool,
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 0.0025,
            batch: 4,
            momentum: 0.9,
            weight_decay: 0.0001,
            poly_power: 0.9,
            carry_prob: 0.9,
            k_shots: 1,
            seed: 0,
            border_width: 3,
            region_weights: RegionWeights::default(),
            augment: true,
            execution: Execution::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.carry_prob) {
            return Err(Error::Config("carry_prob must be in [0, 1]".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if self.batch == 0 || self.k_shots == 0 {
            return Err(Error::Config("batch and k_shots must be positive".into()));
        }
        self.region_weights.validate()
    }
}

/// `base · (1 − iter/total)^power`.
pub fn poly_lr(iter: usize, total_iters: usize, base: f64, power: f64) -> Result<f64> {
    if total_iters == 0 {
        return Err(Error::InvalidInput("poly_lr needs total_iters > 0".into()));
    }
    if iter > total_iters {
        return Err(Error::InvalidInput(format!(
            "iteration {iter} beyond {total_iters}"
        )));
    }
    Ok(base * (1.0 - iter as f64 / total_iters as f64).powf(power))
}

/// The carry/reset coin: `true` keeps stored state.
pub fn carry_coin<R: Rng + ?Sized>(rng: &mut R, carry_prob: f64) -> bool {
    rng.random_bool(carry_prob)
}

/// Stored support-side state, in the image's own (un-augmented) frame.
#[derive(Clone, Debug, PartialEq)]
pub struct SupportState {
    pub seg: Mask,
    pub clicks: ClickMasks,
    pub num_clicks: usize,
}

type StateKey = (String, u8);

/// Carried predictions and click masks keyed by (image id, class).
#[derive(Clone, Debug, Default)]
pub struct IterationState {
    query: HashMap<StateKey, Mask>,
    support: HashMap<StateKey, SupportState>,
}

impl IterationState {
    pub fn query_seg(&self, id: &str, class: u8) -> Option<&Mask> {
        self.query.get(&(id.to_string(), class))
    }

    pub fn support_state(&self, id: &str, class: u8) -> Option<&SupportState> {
        self.support.get(&(id.to_string(), class))
    }

    pub fn len(&self) -> usize {
        self.query.len() + self.support.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stored query mask, blank when absent or when the coin says reset.
    fn take_query<R: Rng + ?Sized>(&self, id: &str, class: u8, dims: (usize, usize), carry_prob: f64, rng: &mut R) -> Mask {
        match self.query_seg(id, class) {
            Some(m) if carry_coin(rng, carry_prob) => m.clone(),
            _ => Mask::new(dims.0, dims.1),
        }
    }

    fn take_support<R: Rng + ?Sized>(&self, id: &str, class: u8, dims: (usize, usize), carry_prob: f64, rng: &mut R) -> SupportState {
        match self.support_state(id, class) {
            Some(s) if carry_coin(rng, carry_prob) => s.clone(),
            _ => SupportState {
                seg: Mask::new(dims.0, dims.1),
                clicks: ClickMasks::blank(dims.0, dims.1),
                num_clicks: 0,
            },
        }
    }
}

/// One image of a prepared sample, already warped into the training crop.
struct Warped {
    id: String,
    transform: GeometricTransform,
    image: RgbImage,
    gt: Mask,
}

struct PreparedSupport {
    view: Warped,
    prev: Mask,
    clicks: ClickMasks,
    stored: SupportState,
    new_click: Option<Click>,
}

/// Everything one batch element needs, decided before any forward pass.
pub struct PreparedSample {
    class: u8,
    query: Warped,
    query_prev: Mask,
    query_stored: Mask,
    supports: Vec<PreparedSupport>,
}

impl PreparedSample {
    pub fn class(&self) -> u8 {
        self.class
    }

    pub fn query_id(&self) -> &str {
        &self.query.id
    }

    pub fn support_ids(&self) -> Vec<&str> {
        self.supports.iter().map(|s| s.view.id.as_str()).collect()
    }
}

struct SampleResult {
    loss: f64,
    grads: HashMap<String, Tensor>,
    query_pred: Mask,
    support_preds: Vec<Mask>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

/// SGD with momentum and L2 weight decay (PyTorch semantics).
pub struct Sgd {
    momentum: f64,
    weight_decay: f64,
    velocity: HashMap<String, Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: HashMap::new(),
        }
    }

    /// Updates trainable parameters only; frozen ones are never touched.
    pub fn step(&mut self, params: &ParamStore, grads: &HashMap<String, Tensor>, lr: f64) -> Result<()> {
        for (name, var) in params.trainable() {
            let Some(g) = grads.get(name) else { continue };
            let w = var.as_tensor().detach();
            let g = (g + (&w * self.weight_decay)?)?;
            let v = match self.velocity.get(name) {
                Some(v) => ((v * self.momentum)? + &g)?,
                None => g,
            };
            var.set(&(&w - (&v * lr)?)?)?;
            self.velocity.insert(name.to_string(), v);
        }
        Ok(())
    }
}

pub struct Trainer<'a> {
    pub model: &'a Ifsenet,
    store: &'a dyn SampleStore,
    fold: FoldSpec,
    cfg: TrainConfig,
    /// Records with at least one training class.
    train_ids: Vec<String>,
    state: IterationState,
    optimizer: Sgd,
    step: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(model: &'a Ifsenet, store: &'a dyn SampleStore, fold: FoldSpec, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let train_ids = fold
            .train_records(store.records())
            .into_iter()
            .map(|r| r.id.clone())
            .collect();
        Ok(Self {
            model,
            store,
            optimizer: Sgd::new(cfg.momentum, cfg.weight_decay),
            fold,
            cfg,
            train_ids,
            state: IterationState::default(),
            step: 0,
        })
    }

    pub fn train_ids(&self) -> &[String] {
        &self.train_ids
    }

    pub fn state(&self) -> &IterationState {
        &self.state
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.train_ids.len().div_ceil(self.cfg.batch)
    }

    fn record(&self, id: &str) -> Result<&'a ImageRecord> {
        self.store
            .record(id)
            .ok_or_else(|| Error::Dataset(format!("unknown record {id}")))
    }

    fn warp(&self, id: &str, class: u8, rng: &mut ChaCha8Rng) -> Result<(Warped, crate::mask::LabelMap)> {
        let rec = self.record(id)?;
        let sample = self.store.load(id)?;
        let gt = binarize_mask(rec, &sample.labels, class)?;
        let patch = self.model.config().input_patch;
        let params = if self.cfg.augment {
            AugmentParams::sample(rng)
        } else {
            AugmentParams::IDENTITY
        };
        let transform = GeometricTransform::new(sample.image.height, sample.image.width, patch, &params);
        Ok((
            Warped {
                id: id.to_string(),
                image: transform.apply_image(&sample.image),
                gt: transform.apply_mask(&gt),
                transform,
            },
            sample.labels,
        ))
    }

    /// Steps 1–8 of a visit plus one new simulated click per support image.
    pub fn prepare(&self, query_id: &str, rng: &mut ChaCha8Rng) -> Result<PreparedSample> {
        let q_rec = self.record(query_id)?;
        let classes: Vec<u8> = q_rec
            .classes_present
            .iter()
            .copied()
            .filter(|&c| self.fold.is_train(c))
            .collect();
        let class = *classes
            .get(rng.random_range(0..classes.len().max(1)))
            .ok_or_else(|| Error::Dataset(format!("{query_id} has no training class")))?;
        assert!(
            !self.fold.is_val(class),
            "validation class {class} selected during training"
        );
        let (query, _) = self.warp(query_id, class, rng)?;
        let src_dims = (query.transform.src_height, query.transform.src_width);
        let query_stored = self
            .state
            .take_query(query_id, class, src_dims, self.cfg.carry_prob, rng);
        let query_prev = query.transform.apply_mask(&query_stored);

        let pool: Vec<ImageRecord> = self
            .train_ids
            .iter()
            .map(|id| self.record(id).cloned())
            .collect::<Result<_>>()?;
        let exclude: HashSet<String> = [query_id.to_string()].into();
        let picked = sample_support(&pool, class, self.cfg.k_shots, &exclude, rng)?;
        let radius = self.model.config().click_disk_radius;
        let mut supports = Vec::with_capacity(picked.len());
        for rec in picked {
            let (view, labels) = self.warp(&rec.id, class, rng)?;
            let dims = (view.transform.src_height, view.transform.src_width);
            let stored = self
                .state
                .take_support(&rec.id, class, dims, self.cfg.carry_prob, rng);
            let prev = view.transform.apply_mask(&stored.seg);
            let mut clicks = ClickMasks {
                positive: view.transform.apply_mask(&stored.clicks.positive),
                negative: view.transform.apply_mask(&stored.clicks.negative),
            };
            let other = view
                .transform
                .apply_mask(&labels.other_classes_mask(class));
            let regions = TrainingRegions::new(&view.gt, &prev, &other, self.cfg.border_width)?;
            let new_click = sample_training_click(&regions, &self.cfg.region_weights, stored.num_clicks, rng)
                .map(|s| s.click);
            if let Some(c) = &new_click {
                clicks.stamp(c, radius)?;
            }
            supports.push(PreparedSupport {
                view,
                prev,
                clicks,
                stored,
                new_click,
            });
        }
        Ok(PreparedSample {
            class,
            query,
            query_prev,
            query_stored,
            supports,
        })
    }

    /// Forward, loss and gradients for one prepared sample.
    fn run(&self, sample: &PreparedSample) -> Result<SampleResult> {
        let support_inputs: Vec<SupportInput<'_>> = sample
            .supports
            .iter()
            .map(|s| SupportInput {
                image: &s.view.image,
                clicks: &s.clicks,
                prev: &s.prev,
            })
            .collect();
        let query_input = QueryInput {
            image: &sample.query.image,
            prev: &sample.query_prev,
        };
        let out = self.model.forward(&support_inputs, &[query_input])?;
        let support_logits: Vec<_> = out.supports.iter().map(|s| s.logits.clone()).collect();
        let support_masks: Vec<Mask> = sample.supports.iter().map(|s| s.view.gt.clone()).collect();
        let q = &out.queries[0];
        let loss = compute_loss(
            &support_logits,
            &support_masks,
            &q.intermediate,
            &q.final_logits,
            &sample.query.gt,
        )?;
        let store = loss.backward()?;
        let mut grads = HashMap::new();
        for (name, var) in self.model.params().trainable() {
            if let Some(g) = store.get(var.as_tensor()) {
                grads.insert(name.to_string(), g.clone());
            }
        }
        Ok(SampleResult {
            loss: loss.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?,
            grads,
            query_pred: q.final_logits.binarize()?,
            support_preds: support_logits
                .iter()
                .map(|l| l.binarize())
                .collect::<Result<_>>()?,
        })
    }

    /// Step 10: store fresh predictions and click masks in each image's own frame.
    fn write_back(&mut self, sample: &PreparedSample, result: &SampleResult) -> Result<()> {
        let radius = self.model.config().click_disk_radius;
        let class = sample.class;
        let q_seg = sample
            .query
            .transform
            .invert_mask(&result.query_pred, &sample.query_stored)?;
        self.state
            .query
            .insert((sample.query.id.clone(), class), q_seg);
        for (s, pred) in sample.supports.iter().zip(&result.support_preds) {
            let seg = s.view.transform.invert_mask(pred, &s.stored.seg)?;
            let mut clicks = s.stored.clicks.clone();
            let mut num_clicks = s.stored.num_clicks;
            if let Some(c) = &s.new_click {
                if let Some((r, col)) = s.view.transform.source_pixel(c.row, c.col) {
                    clicks.stamp(&Click::new(r, col, c.polarity, c.order), radius)?;
                }
                num_clicks += 1;
            }
            self.state.support.insert(
                (s.view.id.clone(), class),
                SupportState {
                    seg,
                    clicks,
                    num_clicks,
                },
            );
        }
        Ok(())
    }

    /// One optimisation step over a batch of query images: each element is an
    /// independent training visit, gradients are averaged.
    pub fn step(&mut self, query_ids: &[String], lr: f64) -> Result<StepLog> {
        if query_ids.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let mut samples = Vec::with_capacity(query_ids.len());
        for (i, id) in query_ids.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                self.cfg.seed,
                &[1, self.step as u64, i as u64],
            ));
            samples.push(self.prepare(id, &mut rng)?);
        }
        let results = self
            .cfg
            .execution
            .map(&samples, |_, s| self.run(s))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let n = results.len() as f64;
        let mut grads: HashMap<String, Tensor> = HashMap::new();
        for r in &results {
            for (name, g) in &r.grads {
                let entry = match grads.remove(name) {
                    Some(acc) => (acc + g)?,
                    None => g.clone(),
                };
                grads.insert(name.clone(), entry);
            }
        }
        for g in grads.values_mut() {
            *g = (&*g / n)?;
        }
        self.optimizer.step(self.model.params(), &grads, lr)?;
        for (s, r) in samples.iter().zip(&results) {
            self.write_back(s, r)?;
        }
        let loss = results.iter().map(|r| r.loss).sum::<f64>() / n;
        let log = StepLog {
            step: self.step,
            loss,
            lr,
        };
        self.step += 1;
        Ok(log)
    }

    /// Shuffled visiting order for an epoch.
    pub fn epoch_order(&self, epoch: usize) -> Vec<String> {
        let mut ids = self.train_ids.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, &[0, epoch as u64]));
        ids.shuffle(&mut rng);
        ids
    }
}

/// Where training writes its artefacts.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub dir: PathBuf,
}

impl TrainOutput {
    pub fn log_path(&self) -> PathBuf {
        self.dir.join("train_log.jsonl")
    }

    pub fn epoch_checkpoint(&self, epoch: usize) -> PathBuf {
        self.dir.join(format!("epoch_{epoch:03}.safetensors"))
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.dir.join("final.safetensors")
    }
}

/// Runs `cfg.epochs` passes over the fold's training images, checkpointing
/// after every epoch and once at the end. Returns the per-step log.
pub fn train(
    model: &mut Ifsenet,
    store: &dyn SampleStore,
    fold: &FoldSpec,
    cfg: &TrainConfig,
    output: Option<&TrainOutput>,
) -> Result<Vec<StepLog>> {
    let mut log_file = match output {
        Some(out) => {
            std::fs::create_dir_all(&out.dir)?;
            Some(std::io::BufWriter::new(std::fs::File::create(out.log_path())?))
        }
        None => None,
    };
    let mut logs = Vec::new();
    {
        let mut trainer = Trainer::new(model, store, fold.clone(), cfg.clone())?;
        let total = (cfg.epochs * trainer.steps_per_epoch()).max(1);
        for epoch in 0..cfg.epochs {
            let order = trainer.epoch_order(epoch);
            for batch in order.chunks(cfg.batch) {
                let lr = poly_lr(trainer.step, total, cfg.lr, cfg.poly_power)?;
                let entry = trainer.step(batch, lr)?;
                tracing::debug!(step = entry.step, loss = entry.loss, lr, "train step");
                if let Some(f) = log_file.as_mut() {
                    serde_json::to_writer(&mut *f, &entry)?;
                    f.write_all(b"\n")?;
                }
                logs.push(entry);
            }
            if let Some(out) = output {
                if let Some(f) = log_file.as_mut() {
                    f.flush()?;
                }
                save_tagged(trainer.model, &out.epoch_checkpoint(epoch), fold, epoch)?;
            }
        }
    }
    if let Some(out) = output {
        model.set_version(format!("fold{}-final", fold.fold));
        checkpoint::save(model, out.final_checkpoint())?;
    }
    Ok(logs)
}

fn save_tagged(model: &Ifsenet, path: &Path, fold: &FoldSpec, epoch: usize) -> Result<()> {
    checkpoint::save_with_version(model, path, &format!("fold{}-epoch{epoch:03}", fold.fold))
}
