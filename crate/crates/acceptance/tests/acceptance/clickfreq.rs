//! Empirical region frequencies of the training-click sampler.

use ifsenet::clicks::{sample_training_click, Polarity, Region, RegionWeights, TrainingRegions};
use ifsenet::Mask;

use crate::common::{chi_square_p, ensure, rng, Outcome};

const DRAWS: usize = 10_000;
const ALPHA: f64 = 0.01;

const REGIONS: [Region; 6] = [
    Region::GtForeground,
    Region::FalseNegative,
    Region::GtBackground,
    Region::OtherClassObjects,
    Region::FgBorder,
    Region::FalsePositive,
];

/// Nominal per-polarity weights, written out independently of the library.
const NOMINAL: [(Region, Polarity, f64); 6] = [
    (Region::GtForeground, Polarity::Positive, 0.2),
    (Region::FalseNegative, Polarity::Positive, 0.8),
    (Region::GtBackground, Polarity::Negative, 0.04),
    (Region::OtherClassObjects, Polarity::Negative, 0.06),
    (Region::FgBorder, Polarity::Negative, 0.1),
    (Region::FalsePositive, Polarity::Negative, 0.8),
];

const SIDE: usize = 6;

/// Region `i` occupies a fixed, distinct set of cells (2 + i of them), or
/// nothing when its bit in `blank` is set.
fn regions_for(blank: u32) -> TrainingRegions {
    let m = |i: usize| {
        if blank >> i & 1 == 1 {
            return Mask::new(SIDE, SIDE);
        }
        Mask::from_fn(SIDE, SIDE, |r, c| r == i && c < 2 + (i % 4))
    };
    TrainingRegions {
        gt_foreground: m(0),
        false_negative: m(1),
        gt_background: m(2),
        other_class_objects: m(3),
        fg_border: m(4),
        false_positive: m(5),
    }
}

/// Probability of each region when polarity is a fair coin, blank regions are
/// dropped and the rest of that polarity renormalised, and an unusable
/// polarity hands over to the other one.
fn expected(blank: u32) -> [f64; 6] {
    let live = |i: usize| blank >> i & 1 == 0;
    let mass = |pol: Polarity| -> f64 {
        NOMINAL
            .iter()
            .enumerate()
            .filter(|(i, (_, p, _))| *p == pol && live(*i))
            .map(|(_, (_, _, w))| w)
            .sum()
    };
    let mut out = [0.0; 6];
    for first in [Polarity::Positive, Polarity::Negative] {
        let second = if first == Polarity::Positive {
            Polarity::Negative
        } else {
            Polarity::Positive
        };
        let used = if mass(first) > 0.0 { first } else { second };
        let total = mass(used);
        if total == 0.0 {
            continue;
        }
        for (i, (_, pol, w)) in NOMINAL.iter().enumerate() {
            if *pol == used && live(i) {
                out[i] += 0.5 * w / total;
            }
        }
    }
    out
}

fn index_of(r: Region) -> usize {
    REGIONS.iter().position(|&x| x == r).unwrap()
}

fn draw(blank: u32, seed: u64) -> Result<Option<[u64; 6]>, String> {
    let regions = regions_for(blank);
    let weights = RegionWeights::default();
    let mut rng = rng(seed);
    let mut counts = [0u64; 6];
    for _ in 0..DRAWS {
        match sample_training_click(&regions, &weights, 0, &mut rng) {
            None => return Ok(None),
            Some(s) => {
                let (r, c) = (s.click.row, s.click.col);
                ensure!(
                    regions.mask(s.region).get(r, c),
                    "click ({r},{c}) outside its region {:?}",
                    s.region
                );
                ensure!(s.click.polarity == s.region.polarity(), "polarity does not match region");
                counts[index_of(s.region)] += 1;
            }
        }
    }
    Ok(Some(counts))
}

pub fn run() -> Outcome {
    let w = RegionWeights::default();
    let lib = [
        w.positive.gt_foreground,
        w.positive.false_negative,
        w.negative.gt_background,
        w.negative.other_class_objects,
        w.negative.fg_border,
        w.negative.false_positive,
    ];
    for (i, (_, _, nominal)) in NOMINAL.iter().enumerate() {
        ensure!(lib[i] == *nominal, "default weight {i} is {}, expected {nominal}", lib[i]);
    }

    // Headline case: every region populated; per-polarity frequencies.
    let counts = draw(0, 100)?.ok_or("sampler returned nothing with every region populated")?;
    let pos = [counts[0], counts[1]];
    let neg = [counts[2], counts[3], counts[4], counts[5]];
    let p_pos = chi_square_p(&pos, &[0.2, 0.8])?;
    let p_neg = chi_square_p(&neg, &[0.04, 0.06, 0.1, 0.8])?;
    let p_coin = chi_square_p(&[pos.iter().sum(), neg.iter().sum()], &[0.5, 0.5])?;
    ensure!(p_pos > ALPHA, "positive regions {pos:?}: p = {p_pos:.4}");
    ensure!(p_neg > ALPHA, "negative regions {neg:?}: p = {p_neg:.4}");
    ensure!(p_coin > ALPHA, "polarity split: p = {p_coin:.4}");

    // Every combination of blank regions.
    let mut min_p = f64::INFINITY;
    for blank in 1u32..64 {
        let exp = expected(blank);
        match draw(blank, 100 + blank as u64)? {
            None => ensure!(exp.iter().all(|&p| p == 0.0), "sampler gave up with blank={blank:06b}"),
            Some(counts) => {
                ensure!(exp.iter().any(|&p| p > 0.0), "sampler drew from all-blank regions");
                let p = chi_square_p(&counts, &exp).map_err(|e| format!("blank={blank:06b}: {e}"))?;
                ensure!(p > ALPHA, "blank={blank:06b} counts {counts:?} expected {exp:?}: p = {p:.4}");
                min_p = min_p.min(p);
            }
        }
    }
    Ok(format!(
        "{DRAWS} draws: pos p={p_pos:.3} neg p={p_neg:.3} coin p={p_coin:.3}; 63 blank combos min p={min_p:.3}"
    ))
}
