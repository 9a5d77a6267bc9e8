//! Click generation, encoding and replay.
//!
//! Two samplers live here: the stochastic region-weighted sampler used while
//! training, and the deterministic largest-error-region sampler used to
//! simulate a user during validation.

use std::collections::VecDeque;
use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::Mask;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Click {
    pub row: usize,
    pub col: usize,
    pub polarity: Polarity,
    /// 0-based position within the owning image's click history.
    pub order: usize,
}

impl Click {
    pub fn new(row: usize, col: usize, polarity: Polarity, order: usize) -> Self {
        Self {
            row,
            col,
            polarity,
            order,
        }
    }
}

/// Checks that `(row, col)` lies in an `height`×`width` grid.
pub fn check_bounds(row: i64, col: i64, height: usize, width: usize) -> Result<(usize, usize)> {
    if row < 0 || col < 0 || row >= height as i64 || col >= width as i64 {
        return Err(Error::OutOfBounds {
            row,
            col,
            height,
            width,
        });
    }
    Ok((row as usize, col as usize))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositiveWeights {
    pub gt_foreground: f64,
    pub false_negative: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NegativeWeights {
    pub gt_background: f64,
    pub other_class_objects: f64,
    pub fg_border: f64,
    pub false_positive: f64,
}

/// Per-polarity region probabilities for the training sampler.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionWeights {
    pub positive: PositiveWeights,
    pub negative: NegativeWeights,
}

impl Default for RegionWeights {
    fn default() -> Self {
        Self {
            positive: PositiveWeights {
                gt_foreground: 0.2,
                false_negative: 0.8,
            },
            negative: NegativeWeights {
                gt_background: 0.04,
                other_class_objects: 0.06,
                fg_border: 0.1,
                false_positive: 0.8,
            },
        }
    }
}

impl RegionWeights {
    pub fn validate(&self) -> Result<()> {
        let pos = [self.positive.gt_foreground, self.positive.false_negative];
        let neg = [
            self.negative.gt_background,
            self.negative.other_class_objects,
            self.negative.fg_border,
            self.negative.false_positive,
        ];
        for (name, ws) in [("positive", &pos[..]), ("negative", &neg[..])] {
            if ws.iter().any(|w| !w.is_finite() || *w < 0.0) {
                return Err(Error::Config(format!("{name} region weights must be >= 0")));
            }
            let sum: f64 = ws.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "{name} region weights sum to {sum}, expected 1"
                )));
            }
        }
        Ok(())
    }
}

/// The named regions a training click can be drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Region {
    GtForeground,
    FalseNegative,
    GtBackground,
    OtherClassObjects,
    FgBorder,
    FalsePositive,
}

impl Region {
    pub fn polarity(self) -> Polarity {
        match self {
            Region::GtForeground | Region::FalseNegative => Polarity::Positive,
            _ => Polarity::Negative,
        }
    }
}

/// Binary masks for each region, derived from ground truth and prediction.
#[derive(Clone, Debug)]
pub struct TrainingRegions {
    pub gt_foreground: Mask,
    pub false_negative: Mask,
    pub gt_background: Mask,
    pub other_class_objects: Mask,
    pub fg_border: Mask,
    pub false_positive: Mask,
}

impl TrainingRegions {
    /// `other_class` is the union of the other classes' ground truth; it is
    /// restricted to the ground-truth background here.
    pub fn new(gt: &Mask, pred: &Mask, other_class: &Mask, border_width: usize) -> Result<Self> {
        let background = gt.not();
        Ok(Self {
            gt_foreground: gt.clone(),
            false_negative: gt.and_not(pred)?,
            other_class_objects: other_class.and(&background)?,
            fg_border: fg_border(gt, border_width),
            false_positive: pred.and_not(gt)?,
            gt_background: background,
        })
    }

    pub fn mask(&self, region: Region) -> &Mask {
        match region {
            Region::GtForeground => &self.gt_foreground,
            Region::FalseNegative => &self.false_negative,
            Region::GtBackground => &self.gt_background,
            Region::OtherClassObjects => &self.other_class_objects,
            Region::FgBorder => &self.fg_border,
            Region::FalsePositive => &self.false_positive,
        }
    }

    /// Candidate regions of one polarity with their nominal weights.
    pub fn candidates(&self, polarity: Polarity, w: &RegionWeights) -> Vec<(Region, f64)> {
        match polarity {
            Polarity::Positive => vec![
                (Region::GtForeground, w.positive.gt_foreground),
                (Region::FalseNegative, w.positive.false_negative),
            ],
            Polarity::Negative => vec![
                (Region::GtBackground, w.negative.gt_background),
                (Region::OtherClassObjects, w.negative.other_class_objects),
                (Region::FgBorder, w.negative.fg_border),
                (Region::FalsePositive, w.negative.false_positive),
            ],
        }
    }

    /// Effective probabilities after dropping blank (or zero-weight) regions and
    /// renormalising the rest. Empty when no region of this polarity is usable.
    pub fn effective(&self, polarity: Polarity, w: &RegionWeights) -> Vec<(Region, f64)> {
        let live: Vec<(Region, f64)> = self
            .candidates(polarity, w)
            .into_iter()
            .filter(|(r, wt)| *wt > 0.0 && !self.mask(*r).is_empty())
            .collect();
        let total: f64 = live.iter().map(|(_, wt)| wt).sum();
        live.into_iter().map(|(r, wt)| (r, wt / total)).collect()
    }
}

/// A sampled training click together with the region it came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampledClick {
    pub click: Click,
    pub region: Region,
}

/// Draws one training click.
///
/// Polarity is a fair coin; if the drawn polarity has no usable region the
/// other one is used. Returns `None` when neither polarity has a usable region.
pub fn sample_training_click<R: Rng + ?Sized>(
    regions: &TrainingRegions,
    weights: &RegionWeights,
    order: usize,
    rng: &mut R,
) -> Option<SampledClick> {
    let first = if rng.random_bool(0.5) {
        Polarity::Positive
    } else {
        Polarity::Negative
    };
    let second = match first {
        Polarity::Positive => Polarity::Negative,
        Polarity::Negative => Polarity::Positive,
    };
    let choices = {
        let e = regions.effective(first, weights);
        if e.is_empty() {
            regions.effective(second, weights)
        } else {
            e
        }
    };
    if choices.is_empty() {
        return None;
    }
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut region = choices[choices.len() - 1].0;
    for &(r, p) in &choices {
        acc += p;
        if u < acc {
            region = r;
            break;
        }
    }
    let mask = regions.mask(region);
    let n = mask.count();
    let (row, col) = mask
        .nth_one(rng.random_range(0..n))
        .expect("region is nonempty");
    Some(SampledClick {
        click: Click::new(row, col, region.polarity(), order),
        region,
    })
}

/// Convenience wrapper building the regions from raw masks.
pub fn sample_training_click_from_masks<R: Rng + ?Sized>(
    gt: &Mask,
    pred: &Mask,
    other_class: &Mask,
    weights: &RegionWeights,
    border_width: usize,
    order: usize,
    rng: &mut R,
) -> Result<Option<SampledClick>> {
    let regions = TrainingRegions::new(gt, pred, other_class, border_width)?;
    Ok(sample_training_click(&regions, weights, order, rng))
}

/// Morphological dilation of the foreground by a (2·width+1)² square, minus
/// the foreground itself.
pub fn fg_border(gt: &Mask, width: usize) -> Mask {
    let (h, w) = gt.dims();
    // Separable max filter: rows, then columns.
    let mut horiz = Mask::new(h, w);
    for r in 0..h {
        let mut last: Option<usize> = None;
        let mut next = vec![usize::MAX; w];
        let mut upcoming: Option<usize> = None;
        for c in (0..w).rev() {
            if gt.get(r, c) {
                upcoming = Some(c);
            }
            next[c] = upcoming.unwrap_or(usize::MAX);
        }
        for c in 0..w {
            if gt.get(r, c) {
                last = Some(c);
            }
            let near_left = last.is_some_and(|l| c - l <= width);
            let near_right = next[c] != usize::MAX && next[c] - c <= width;
            horiz.set(r, c, near_left || near_right);
        }
    }
    let mut dilated = Mask::new(h, w);
    for c in 0..w {
        let mut last: Option<usize> = None;
        let mut next = vec![usize::MAX; h];
        let mut upcoming: Option<usize> = None;
        for r in (0..h).rev() {
            if horiz.get(r, c) {
                upcoming = Some(r);
            }
            next[r] = upcoming.unwrap_or(usize::MAX);
        }
        for r in 0..h {
            if horiz.get(r, c) {
                last = Some(r);
            }
            let near_up = last.is_some_and(|l| r - l <= width);
            let near_down = next[r] != usize::MAX && next[r] - r <= width;
            dilated.set(r, c, near_up || near_down);
        }
    }
    dilated.and_not(gt).expect("same dims")
}

/// 8-connected components in raster order. Returns a per-pixel label
/// (`u32::MAX` for background) and `(size, first_raster_index)` per component.
pub fn connected_components(mask: &Mask) -> (Vec<u32>, Vec<(usize, usize)>) {
    let (h, w) = mask.dims();
    let mut labels = vec![u32::MAX; h * w];
    let mut comps = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if mask.as_slice()[start] == 0 || labels[start] != u32::MAX {
            continue;
        }
        let id = comps.len() as u32;
        labels[start] = id;
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (r, c) = ((i / w) as i64, (i % w) as i64);
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (nr, nc) = (r + dr, c + dc);
                    if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
                        continue;
                    }
                    let j = nr as usize * w + nc as usize;
                    if mask.as_slice()[j] != 0 && labels[j] == u32::MAX {
                        labels[j] = id;
                        queue.push_back(j);
                    }
                }
            }
        }
        comps.push((size, start));
    }
    (labels, comps)
}

/// Squared Euclidean distance from each region pixel to the nearest pixel
/// outside the region. Pixels beyond the image border count as outside.
pub fn squared_distance_transform(region: &Mask) -> Vec<f64> {
    let (h, w) = region.dims();
    let (ph, pw) = (h + 2, w + 2);
    // Exceeds any in-grid squared distance and keeps the parabola arithmetic exact.
    let inf = (2 * (ph + pw) * (ph + pw)) as f64;
    let mut grid = vec![0.0f64; ph * pw];
    for r in 0..h {
        for c in 0..w {
            if region.get(r, c) {
                grid[(r + 1) * pw + c + 1] = inf;
            }
        }
    }
    let mut buf = vec![0.0; ph.max(pw)];
    let mut out = vec![0.0; ph.max(pw)];
    for c in 0..pw {
        for r in 0..ph {
            buf[r] = grid[r * pw + c];
        }
        edt_1d(&buf[..ph], &mut out[..ph]);
        for r in 0..ph {
            grid[r * pw + c] = out[r];
        }
    }
    for r in 0..ph {
        buf[..pw].copy_from_slice(&grid[r * pw..(r + 1) * pw]);
        edt_1d(&buf[..pw], &mut out[..pw]);
        grid[r * pw..(r + 1) * pw].copy_from_slice(&out[..pw]);
    }
    let mut result = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            result[r * w + c] = grid[(r + 1) * pw + c + 1];
        }
    }
    result
}

/// Lower envelope of parabolas (Felzenszwalb & Huttenlocher).
fn edt_1d(f: &[f64], d: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let parabola = |q: usize, p: usize| {
        ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64)
    };
    for q in 1..n {
        let mut s = parabola(q, v[k]);
        // z[0] is -inf, so k never underflows.
        while s <= z[k] {
            k -= 1;
            s = parabola(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, dq) in d.iter_mut().enumerate().take(n) {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let diff = q as f64 - v[k] as f64;
        *dq = diff * diff + f[v[k]];
    }
}

/// The largest mislabelled region and the click placed at its centre.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ErrorRegion {
    pub region: Mask,
    pub center: (usize, usize),
    /// True when the centre pixel is ground-truth foreground (missed object).
    pub is_false_negative: bool,
}

/// Finds the largest 8-connected component of `gt XOR pred` and the pixel
/// farthest from its boundary. `Ok(None)` means the prediction is exact.
///
/// Ties between equally large components go to the one whose first pixel comes
/// earliest in raster order; ties between equally central pixels likewise.
pub fn largest_error_region(gt: &Mask, pred: &Mask) -> Result<Option<ErrorRegion>> {
    let error = gt.xor(pred)?;
    let (labels, comps) = connected_components(&error);
    let Some((best, _)) = comps
        .iter()
        .enumerate()
        .max_by(|(_, a), (_, b)| a.0.cmp(&b.0).then(b.1.cmp(&a.1)))
    else {
        return Ok(None);
    };
    let (h, w) = gt.dims();
    let region = Mask::from_vec(
        h,
        w,
        labels.iter().map(|&l| (l == best as u32) as u8).collect(),
    )?;
    let dist = squared_distance_transform(&region);
    let mut center = 0;
    let mut best_d = -1.0;
    for (i, &d) in dist.iter().enumerate() {
        if region.as_slice()[i] != 0 && d > best_d {
            best_d = d;
            center = i;
        }
    }
    let center = (center / w, center % w);
    Ok(Some(ErrorRegion {
        is_false_negative: gt.get(center.0, center.1),
        region,
        center,
    }))
}

/// Simulated user click: positive on a missed object, negative on a false alarm.
/// `Ok(None)` when the prediction already equals the ground truth.
pub fn sample_validation_click(gt: &Mask, pred: &Mask, order: usize) -> Result<Option<Click>> {
    Ok(largest_error_region(gt, pred)?.map(|e| {
        let polarity = if e.is_false_negative {
            Polarity::Positive
        } else {
            Polarity::Negative
        };
        Click::new(e.center.0, e.center.1, polarity, order)
    }))
}

/// Positive and negative click channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClickMasks {
    pub positive: Mask,
    pub negative: Mask,
}

impl ClickMasks {
    pub fn blank(height: usize, width: usize) -> Self {
        Self {
            positive: Mask::new(height, width),
            negative: Mask::new(height, width),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.positive.dims()
    }

    /// Stamps one click disk onto the matching channel.
    pub fn stamp(&mut self, click: &Click, radius: usize) -> Result<()> {
        let (h, w) = self.dims();
        check_bounds(click.row as i64, click.col as i64, h, w)?;
        let target = match click.polarity {
            Polarity::Positive => &mut self.positive,
            Polarity::Negative => &mut self.negative,
        };
        stamp_disk(target, click.row, click.col, radius);
        Ok(())
    }
}

fn stamp_disk(mask: &mut Mask, row: usize, col: usize, radius: usize) {
    let (h, w) = mask.dims();
    let r2 = (radius * radius) as i64;
    let r0 = row.saturating_sub(radius);
    let r1 = (row + radius).min(h - 1);
    let c0 = col.saturating_sub(radius);
    let c1 = (col + radius).min(w - 1);
    for r in r0..=r1 {
        for c in c0..=c1 {
            let dr = r as i64 - row as i64;
            let dc = c as i64 - col as i64;
            if dr * dr + dc * dc <= r2 {
                mask.set(r, c, true);
            }
        }
    }
}

/// Union of filled disks per polarity, clipped at the borders.
pub fn encode_clicks(history: &[Click], height: usize, width: usize, radius: usize) -> Result<ClickMasks> {
    let mut masks = ClickMasks::blank(height, width);
    for click in history {
        masks.stamp(click, radius)?;
    }
    Ok(masks)
}

/// One line of a click log.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClickRecord {
    pub image_id: String,
    pub row: usize,
    pub col: usize,
    pub polarity: Polarity,
    pub order: usize,
}

impl ClickRecord {
    pub fn new(image_id: impl Into<String>, click: &Click) -> Self {
        Self {
            image_id: image_id.into(),
            row: click.row,
            col: click.col,
            polarity: click.polarity,
            order: click.order,
        }
    }

    pub fn click(&self) -> Click {
        Click::new(self.row, self.col, self.polarity, self.order)
    }
}

/// Writes click records as JSON lines.
pub fn write_click_log<W: Write>(mut out: W, records: &[ClickRecord]) -> Result<()> {
    for rec in records {
        serde_json::to_writer(&mut out, rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads a JSON-lines click log, checking that orders increase per image.
pub fn read_click_log<R: BufRead>(input: R) -> Result<Vec<ClickRecord>> {
    let mut records = Vec::new();
    let mut last: std::collections::HashMap<String, usize> = Default::default();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ClickRecord = serde_json::from_str(&line)?;
        if let Some(&prev) = last.get(&rec.image_id) {
            if rec.order <= prev {
                return Err(Error::InvalidInput(format!(
                    "click order {} for {} does not follow {prev}",
                    rec.order, rec.image_id
                )));
            }
        }
        last.insert(rec.image_id.clone(), rec.order);
        records.push(rec);
    }
    Ok(records)
}
