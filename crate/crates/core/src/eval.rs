//! Episodic validation with simulated clicks and the evaluation metrics.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clicks::{sample_validation_click, write_click_log, Click, ClickRecord};
use crate::dataset::{binarize_mask, EpisodeSpec, FoldSpec, SampleStore};
use crate::error::{Error, Result};
use crate::interactive::{PreparedImage, Segmenter, Workspace};
use crate::mask::Mask;
use crate::par::{derive_seed, Execution};

/// Clicks per support image in one episode.
pub const CLICK_BUDGET: usize = 20;

/// Foreground IoU; two empty masks agree perfectly.
pub fn iou(pred: &Mask, gt: &Mask) -> Result<f64> {
    let inter = pred.intersection_count(gt)?;
    let union = pred.union_count(gt)?;
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// 1-based index of the first entry reaching `threshold`, else `cap`.
pub fn noc(trace: &[f64], threshold: f64, cap: usize) -> usize {
    trace
        .iter()
        .take(cap)
        .position(|&v| v >= threshold)
        .map_or(cap, |i| i + 1)
}

/// Canvas geometry used to run an episode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Canvas {
    pub target: usize,
    pub click_radius: usize,
}

impl Canvas {
    pub fn of(model: &crate::model::Ifsenet) -> Self {
        Self {
            target: model.config().input_patch,
            click_radius: model.config().click_disk_radius,
        }
    }
}

/// Original-resolution masks after one click round.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundMasks {
    pub supports: Vec<Mask>,
    pub queries: Vec<Mask>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeResult {
    pub spec: EpisodeSpec,
    /// `[support][t]`, t = 0 is the state after the first click.
    pub support_iou: Vec<Vec<f64>>,
    pub query_iou: Vec<Vec<f64>>,
    /// Clicks placed on each support image, original coordinates.
    pub click_log: Vec<Vec<Click>>,
    /// Per-round masks, when requested.
    pub masks: Option<Vec<RoundMasks>>,
}

impl EpisodeResult {
    pub fn click_records(&self) -> Vec<ClickRecord> {
        self.spec
            .support_ids
            .iter()
            .zip(&self.click_log)
            .flat_map(|(id, clicks)| clicks.iter().map(move |c| ClickRecord::new(id.clone(), c)))
            .collect()
    }

    /// Clicks in the order they were placed: round by round, support by support.
    pub fn clicks_in_placement_order(&self) -> Vec<ClickRecord> {
        let mut out = Vec::new();
        for t in 0..CLICK_BUDGET {
            for (id, clicks) in self.spec.support_ids.iter().zip(&self.click_log) {
                if let Some(c) = clicks.get(t) {
                    out.push(ClickRecord::new(id.clone(), c));
                }
            }
        }
        out
    }
}

/// Runs the 20-click protocol on one episode. Query images never receive
/// clicks. A support image whose prediction matches its ground truth is
/// frozen: it receives no further clicks and its IoU is held. When every
/// support is frozen no further forward passes are made.
pub fn run_episode(
    spec: &EpisodeSpec,
    store: &dyn SampleStore,
    segmenter: &dyn Segmenter,
    canvas: Canvas,
    record_masks: bool,
) -> Result<EpisodeResult> {
    let load = |id: &str| -> Result<(PreparedImage, Mask)> {
        let rec = store
            .record(id)
            .ok_or_else(|| Error::Dataset(format!("unknown record {id}")))?;
        let sample = store.load(id)?;
        let gt = binarize_mask(rec, &sample.labels, spec.class_chosen)?;
        Ok((PreparedImage::new(id, &sample.image, canvas.target)?, gt))
    };
    let (s_imgs, s_gt): (Vec<_>, Vec<_>) = spec
        .support_ids
        .iter()
        .map(|id| load(id))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .unzip();
    let (q_imgs, q_gt): (Vec<_>, Vec<_>) = spec
        .query_ids
        .iter()
        .map(|id| load(id))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .unzip();
    let mut ws = Workspace::new(s_imgs, q_imgs, canvas.target, canvas.click_radius)?;
    let s = s_gt.len();
    let q = q_gt.len();
    let mut support_iou = vec![Vec::with_capacity(CLICK_BUDGET); s];
    let mut query_iou = vec![Vec::with_capacity(CLICK_BUDGET); q];
    let mut masks = record_masks.then(Vec::new);

    for _ in 0..CLICK_BUDGET {
        let mut placed = false;
        for (i, gt) in s_gt.iter().enumerate() {
            if ws.supports()[i].frozen {
                continue;
            }
            let pred = ws.support_mask(i)?;
            let order = ws.supports()[i].clicks.len();
            match sample_validation_click(gt, &pred, order)? {
                Some(c) => {
                    ws.add_click(i, c.row as i64, c.col as i64, c.polarity)?;
                    placed = true;
                }
                None => ws.freeze(i),
            }
        }
        if placed {
            ws.refresh(segmenter)?;
        }
        let s_masks = (0..s).map(|i| ws.support_mask(i)).collect::<Result<Vec<_>>>()?;
        let q_masks = (0..q).map(|i| ws.query_mask(i)).collect::<Result<Vec<_>>>()?;
        for (trace, (m, gt)) in support_iou.iter_mut().zip(s_masks.iter().zip(&s_gt)) {
            trace.push(iou(m, gt)?);
        }
        for (trace, (m, gt)) in query_iou.iter_mut().zip(q_masks.iter().zip(&q_gt)) {
            trace.push(iou(m, gt)?);
        }
        if let Some(rounds) = masks.as_mut() {
            rounds.push(RoundMasks {
                supports: s_masks,
                queries: q_masks,
            });
        }
    }
    Ok(EpisodeResult {
        spec: spec.clone(),
        support_iou,
        query_iou,
        click_log: ws.supports().iter().map(|e| e.clicks.clone()).collect(),
        masks,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub episodes: usize,
    pub episodes_per_class: BTreeMap<u8, usize>,
    /// Mean over classes of per-class mean query IoU, after each click round.
    pub class_miou_curve: Vec<f64>,
    /// `class_miou_curve` at the full budget.
    pub class_miou: f64,
    /// Per-class query mIoU at the full budget.
    pub per_class_miou: BTreeMap<u8, f64>,
    /// Mean support IoU over every support image, regardless of class.
    pub interactive_miou_curve: Vec<f64>,
    pub noc85: f64,
    pub noc90: f64,
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Reduces episode results into a report. Order of `results` does not matter
/// beyond floating-point summation order, which is fixed by sorting.
pub fn aggregate(results: &[EpisodeResult]) -> Result<MetricReport> {
    if results.is_empty() {
        return Err(Error::InvalidInput("no episodes to aggregate".into()));
    }
    let mut by_class: BTreeMap<u8, Vec<&EpisodeResult>> = BTreeMap::new();
    for r in results {
        by_class.entry(r.spec.class_chosen).or_default().push(r);
    }
    let class_curve = |class_eps: &[&EpisodeResult], t: usize| -> f64 {
        let mut vals: Vec<f64> = class_eps
            .iter()
            .flat_map(|r| r.query_iou.iter().map(move |tr| tr[t]))
            .collect();
        vals.sort_by(f64::total_cmp);
        mean(vals)
    };
    let class_miou_curve: Vec<f64> = (0..CLICK_BUDGET)
        .map(|t| mean(by_class.values().map(|eps| class_curve(eps, t))))
        .collect();
    let per_class_miou = by_class
        .iter()
        .map(|(&c, eps)| (c, class_curve(eps, CLICK_BUDGET - 1)))
        .collect();
    let mut support_traces: Vec<&Vec<f64>> = results.iter().flat_map(|r| &r.support_iou).collect();
    support_traces.sort_by(|a, b| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let interactive_miou_curve = (0..CLICK_BUDGET)
        .map(|t| mean(support_traces.iter().map(|tr| tr[t])))
        .collect();
    let noc_mean = |th: f64| mean(support_traces.iter().map(|tr| noc(tr, th, CLICK_BUDGET) as f64));
    Ok(MetricReport {
        episodes: results.len(),
        episodes_per_class: by_class.iter().map(|(&c, v)| (c, v.len())).collect(),
        class_miou: class_miou_curve[CLICK_BUDGET - 1],
        class_miou_curve,
        per_class_miou,
        interactive_miou_curve,
        noc85: noc_mean(0.85),
        noc90: noc_mean(0.90),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub shots: usize,
    pub queries: usize,
    pub episodes_per_class: usize,
    pub seed: u64,
    pub execution: Execution,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            shots: 1,
            queries: 5,
            episodes_per_class: 100,
            seed: 0,
            execution: Execution::default(),
        }
    }
}

/// Episode specs for every validation class, each drawn from its own stream.
pub fn sample_episodes(store: &dyn SampleStore, fold: &FoldSpec, cfg: &EvalConfig) -> Result<Vec<EpisodeSpec>> {
    let mut specs = Vec::with_capacity(fold.val_classes.len() * cfg.episodes_per_class);
    for &class in &fold.val_classes {
        for e in 0..cfg.episodes_per_class {
            let seed = derive_seed(cfg.seed, &[class as u64, e as u64]);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            specs.push(EpisodeSpec::sample(
                store.records(),
                class,
                cfg.shots,
                cfg.queries,
                seed,
                &mut rng,
            )?);
        }
    }
    Ok(specs)
}

/// Samples and runs every validation episode, then aggregates.
pub fn run_validation(
    segmenter: &dyn Segmenter,
    canvas: Canvas,
    store: &dyn SampleStore,
    fold: &FoldSpec,
    cfg: &EvalConfig,
) -> Result<(MetricReport, Vec<EpisodeResult>)> {
    let specs = sample_episodes(store, fold, cfg)?;
    let results = cfg
        .execution
        .map(&specs, |_, spec| run_episode(spec, store, segmenter, canvas, false))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok((aggregate(&results)?, results))
}

pub fn write_report(path: impl AsRef<Path>, report: &MetricReport) -> Result<()> {
    let file = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(file, report)?;
    Ok(())
}

/// Curve table: one row per click count.
pub fn write_curves_csv(path: impl AsRef<Path>, report: &MetricReport) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "clicks,class_miou,interactive_miou")?;
    for (t, (c, i)) in report
        .class_miou_curve
        .iter()
        .zip(&report.interactive_miou_curve)
        .enumerate()
    {
        writeln!(out, "{},{c},{i}", t + 1)?;
    }
    out.flush()?;
    Ok(())
}

/// One click log per episode, `episode_NNNN.jsonl`, in placement order.
pub fn write_click_logs(dir: impl AsRef<Path>, results: &[EpisodeResult]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    for (i, r) in results.iter().enumerate() {
        let file = std::fs::File::create(dir.join(format!("episode_{i:04}.jsonl")))?;
        write_click_log(std::io::BufWriter::new(file), &r.clicks_in_placement_order())?;
    }
    Ok(())
}
