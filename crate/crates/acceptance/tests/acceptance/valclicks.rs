//! Simulated-user clicks: placement against brute-force oracles, replay, and
//! convergence under a segmenter that fixes exactly what is clicked.

use std::collections::HashMap;

use rand::Rng;

use ifsenet::clicks::{sample_validation_click, Polarity};
use ifsenet::dataset::synthetic::{generate, SyntheticSpec};
use ifsenet::dataset::{binarize_mask, EpisodeSpec, SampleStore};
use ifsenet::eval::{run_episode, Canvas, EpisodeResult};
use ifsenet::interactive::{QueryView, Segmentation, Segmenter, SupportView};
use ifsenet::Mask;

use crate::common::{ensure, err, rng, Outcome};

/// Labels 8-connected components by flood fill; returns labels (0 = none)
/// and component sizes indexed by label - 1.
fn components(m: &Mask) -> (Vec<usize>, Vec<usize>) {
    let (h, w) = m.dims();
    let mut label = vec![0usize; h * w];
    let mut sizes = Vec::new();
    for start in 0..h * w {
        if !m.get(start / w, start % w) || label[start] != 0 {
            continue;
        }
        sizes.push(0);
        let id = sizes.len();
        let mut stack = vec![start];
        label[start] = id;
        while let Some(i) = stack.pop() {
            sizes[id - 1] += 1;
            let (r, c) = (i / w, i % w);
            for nr in r.saturating_sub(1)..=(r + 1).min(h - 1) {
                for nc in c.saturating_sub(1)..=(c + 1).min(w - 1) {
                    let j = nr * w + nc;
                    if m.get(nr, nc) && label[j] == 0 {
                        label[j] = id;
                        stack.push(j);
                    }
                }
            }
        }
    }
    (label, sizes)
}

/// Largest component, earliest first pixel on ties; then the pixel with the
/// greatest squared distance to anything outside it (off-image included),
/// earliest in raster order on ties.
fn oracle_click(gt: &Mask, pred: &Mask) -> Option<(usize, usize, Polarity)> {
    let (h, w) = gt.dims();
    let err = Mask::from_fn(h, w, |r, c| gt.get(r, c) != pred.get(r, c));
    let (label, sizes) = components(&err);
    let biggest = sizes.iter().copied().max()?;
    // Labels are assigned in raster order of first pixel.
    let id = sizes.iter().position(|&s| s == biggest)? + 1;
    let inside = |r: usize, c: usize| label[r * w + c] == id;
    let mut best: Option<(usize, usize, usize)> = None;
    for r in 0..h {
        for c in 0..w {
            if !inside(r, c) {
                continue;
            }
            let edge = [r + 1, h - r, c + 1, w - c].into_iter().min().unwrap();
            let mut d = edge * edge;
            for rr in 0..h {
                for cc in 0..w {
                    if !inside(rr, cc) {
                        let dr = rr.abs_diff(r);
                        let dc = cc.abs_diff(c);
                        d = d.min(dr * dr + dc * dc);
                    }
                }
            }
            if best.is_none_or(|(_, _, bd)| d > bd) {
                best = Some((r, c, d));
            }
        }
    }
    let (r, c, _) = best?;
    let pol = if gt.get(r, c) {
        Polarity::Positive
    } else {
        Polarity::Negative
    };
    Some((r, c, pol))
}

/// Union of a few rectangles plus sparse speckle.
fn blobby(rng: &mut impl Rng, h: usize, w: usize) -> Mask {
    let rects: Vec<(usize, usize, usize, usize)> = (0..rng.random_range(0..5))
        .map(|_| {
            let r0 = rng.random_range(0..h);
            let c0 = rng.random_range(0..w);
            (r0, c0, r0 + rng.random_range(1..=(h / 2).max(1)), c0 + rng.random_range(1..=(w / 2).max(1)))
        })
        .collect();
    let speckle = rng.random_range(0.0..0.05);
    Mask::from_fn(h, w, |r, c| {
        rects.iter().any(|&(r0, c0, r1, c1)| r >= r0 && r < r1 && c >= c0 && c < c1)
            || rng.random_bool(speckle)
    })
}

fn check_placement() -> Outcome {
    let mut rng = rng(21);
    let mut clicks = 0;
    for case in 0..400 {
        let (h, w) = if case % 4 == 0 {
            (rng.random_range(1..=12), rng.random_range(1..=12))
        } else {
            (32, 32)
        };
        let gt = blobby(&mut rng, h.max(2), w.max(2));
        let pred = if case % 3 == 0 {
            Mask::new(gt.height(), gt.width())
        } else {
            blobby(&mut rng, gt.height(), gt.width())
        };
        let got = sample_validation_click(&gt, &pred, 0).map_err(err)?;
        let want = oracle_click(&gt, &pred);
        match (got, want) {
            (None, None) => {}
            (Some(c), Some((r, col, pol))) => {
                ensure!(
                    (c.row, c.col, c.polarity) == (r, col, pol),
                    "case {case}: click ({},{},{:?}), oracle ({r},{col},{pol:?})",
                    c.row,
                    c.col,
                    c.polarity
                );
                clicks += 1;
            }
            (g, w) => return Err(format!("case {case}: library {g:?}, oracle {w:?}")),
        }
    }
    Ok(format!("{clicks} clicks match the component/distance oracle"))
}

/// Fixes every error pixel covered by a click disk and nothing else.
struct Flipper {
    gt: HashMap<String, Mask>,
}

impl Segmenter for Flipper {
    fn segment(
        &self,
        supports: &[SupportView<'_>],
        queries: &[QueryView<'_>],
    ) -> ifsenet::Result<Segmentation> {
        let supports = supports
            .iter()
            .map(|v| {
                let gt = &self.gt[v.id];
                let (h, w) = gt.dims();
                Mask::from_fn(h, w, |r, c| {
                    let touched = v.clicks.positive.get(r, c) || v.clicks.negative.get(r, c);
                    if touched {
                        gt.get(r, c)
                    } else {
                        v.prev.get(r, c)
                    }
                })
            })
            .collect();
        Ok(Segmentation {
            supports,
            queries: queries.iter().map(|q| q.prev.clone()).collect(),
        })
    }
}

fn error_count(a: &Mask, b: &Mask) -> usize {
    a.xor(b).unwrap().count()
}

fn check_episode_replay() -> Outcome {
    let size = 48;
    let store = generate(&SyntheticSpec {
        images: 12,
        size,
        classes: vec![1, 2],
        second_object: 0.5,
        seed: 3,
    });
    let canvas = Canvas {
        target: size,
        click_radius: 3,
    };
    let mut gt = HashMap::new();
    for rec in store.records() {
        let sample = store.load(&rec.id).map_err(err)?;
        gt.insert(rec.id.clone(), binarize_mask(rec, &sample.labels, 1).unwrap_or_else(|_| Mask::new(size, size)));
    }
    let flipper = Flipper { gt: gt.clone() };
    let mut rng = rng(22);
    let mut total_clicks = 0;
    let mut converged = 0;
    for e in 0..6 {
        let spec = EpisodeSpec::sample(store.records(), 1, 2, 1, e, &mut rng).map_err(err)?;
        let run = || run_episode(&spec, &store, &flipper, canvas, true).map_err(err);
        let a: EpisodeResult = run()?;
        ensure!(a == run()?, "episode {e} differs between runs");
        let rounds = a.masks.as_ref().ok_or("masks not recorded")?;
        for (s, id) in spec.support_ids.iter().enumerate() {
            let g = &gt[id];
            let mut prev = Mask::new(size, size);
            let mut last_err = error_count(&prev, g);
            for (t, click) in a.click_log[s].iter().enumerate() {
                // Replaying the log: each click is the one the rule picks on
                // the previous round's mask.
                let want = sample_validation_click(g, &prev, t).map_err(err)?;
                ensure!(want == Some(*click), "episode {e} support {s} click {t}: {click:?} vs {want:?}");
                let now = &rounds[t].supports[s];
                let now_err = error_count(now, g);
                ensure!(now_err < last_err, "episode {e} support {s} click {t}: error {last_err} -> {now_err}");
                last_err = now_err;
                prev = now.clone();
                total_clicks += 1;
            }
            if last_err == 0 {
                converged += 1;
            }
        }
    }
    Ok(format!("{total_clicks} replayed clicks, error strictly decreasing, {converged}/12 supports converged"))
}

pub fn run() -> Outcome {
    let a = check_placement()?;
    let b = check_episode_replay()?;
    Ok(format!("{a}; {b}"))
}
