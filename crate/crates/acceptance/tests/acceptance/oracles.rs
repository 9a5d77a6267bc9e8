//! Plain-loop reference implementations compared against the library on
//! exhaustive or densely sampled small grids.

use candle_core::{DType, Device, Tensor};
use rand::Rng;

use ifsenet::clicks::{encode_clicks, fg_border, Click, Polarity};
use ifsenet::eval::{iou, noc};
use ifsenet::model::{
    attention_prior, compute_loss, compute_support_vector, FeatureMap, Ifsenet, Logits, ModelConfig,
};
use ifsenet::Mask;

use crate::common::{ensure, err, mask_from_bits, random_mask, rng, Outcome};

const TOL: f64 = 1e-6;

/// Dense `C×H×W` array, row-major.
#[derive(Clone)]
struct Grid {
    c: usize,
    h: usize,
    w: usize,
    v: Vec<f64>,
}

impl Grid {
    fn random(rng: &mut impl Rng, c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            v: (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }

    fn at(&self, ch: usize, r: usize, col: usize) -> f64 {
        self.v[(ch * self.h + r) * self.w + col]
    }

    fn cell(&self, r: usize, col: usize) -> Vec<f64> {
        (0..self.c).map(|ch| self.at(ch, r, col)).collect()
    }

    fn tensor(&self) -> Tensor {
        Tensor::from_vec(self.v.clone(), (1, self.c, self.h, self.w), &Device::Cpu).unwrap()
    }

    fn feature_map(&self) -> FeatureMap {
        FeatureMap::new(self.tensor(), 8).unwrap()
    }
}

fn flat(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64)
        .unwrap()
        .flatten_all()
        .unwrap()
        .to_vec1::<f64>()
        .unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> Result<f64, String> {
    ensure!(a.len() == b.len(), "length {} vs {}", a.len(), b.len());
    Ok(a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max))
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn attention_oracle(support: &Grid, query: &Grid, fg: &Mask) -> Vec<f64> {
    let n = query.h * query.w;
    let fg_cells: Vec<Vec<f64>> = (0..support.h)
        .flat_map(|r| (0..support.w).map(move |c| (r, c)))
        .filter(|&(r, c)| fg.get(r, c))
        .map(|(r, c)| support.cell(r, c))
        .collect();
    if fg_cells.is_empty() {
        return vec![0.0; n];
    }
    let mut raw = Vec::with_capacity(n);
    for r in 0..query.h {
        for c in 0..query.w {
            let q = query.cell(r, c);
            let best = fg_cells
                .iter()
                .map(|s| cosine(&q, s))
                .fold(f64::NEG_INFINITY, f64::max);
            raw.push(best);
        }
    }
    let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return vec![0.0; n];
    }
    raw.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

fn support_vector_oracle(feat: &Grid, fg: &Mask) -> Vec<f64> {
    let count = fg.count();
    (0..feat.c)
        .map(|ch| {
            if count == 0 {
                return 0.0;
            }
            let mut sum = 0.0;
            for r in 0..feat.h {
                for c in 0..feat.w {
                    if fg.get(r, c) {
                        sum += feat.at(ch, r, c);
                    }
                }
            }
            sum / count as f64
        })
        .collect()
}

/// `weight` is `out×in` row-major.
fn click_vector_oracle(bottleneck: &Grid, weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let cells = (bottleneck.h * bottleneck.w) as f64;
    (0..bias.len())
        .map(|o| {
            let mut total = 0.0;
            for r in 0..bottleneck.h {
                for c in 0..bottleneck.w {
                    let mut y = bias[o];
                    for i in 0..bottleneck.c {
                        y += weight[o * bottleneck.c + i] * bottleneck.at(i, r, c);
                    }
                    total += y;
                }
            }
            total / cells
        })
        .collect()
}

/// `-log softmax(l)[y]` averaged over pixels; `l` is `2×H×W`.
fn bce_oracle(l: &Grid, target: &Mask) -> f64 {
    let mut total = 0.0;
    for r in 0..l.h {
        for c in 0..l.w {
            let (a, b) = (l.at(0, r, c), l.at(1, r, c));
            let m = a.max(b);
            let lse = m + ((a - m).exp() + (b - m).exp()).ln();
            let chosen = if target.get(r, c) { b } else { a };
            total += lse - chosen;
        }
    }
    total / (l.h * l.w) as f64
}

fn nearest_oracle(m: &Mask, h: usize, w: usize) -> Mask {
    let (ih, iw) = m.dims();
    Mask::from_fn(h, w, |r, c| {
        let sr = ((2 * r + 1) * ih / (2 * h)).min(ih - 1);
        let sc = ((2 * c + 1) * iw / (2 * w)).min(iw - 1);
        m.get(sr, sc)
    })
}

fn loss_oracle(
    supports: &[(Grid, Mask)],
    intermediate: &[Grid],
    last: &Grid,
    query_mask: &Mask,
) -> f64 {
    let s = supports.iter().map(|(l, m)| bce_oracle(l, m)).sum::<f64>() / supports.len() as f64;
    let i = intermediate
        .iter()
        .map(|l| bce_oracle(l, &nearest_oracle(query_mask, l.h, l.w)))
        .sum::<f64>()
        / intermediate.len() as f64;
    s + i + bce_oracle(last, query_mask)
}

fn iou_oracle(a: &Mask, b: &Mask) -> f64 {
    let (h, w) = a.dims();
    let (mut inter, mut union) = (0usize, 0usize);
    for r in 0..h {
        for c in 0..w {
            inter += (a.get(r, c) && b.get(r, c)) as usize;
            union += (a.get(r, c) || b.get(r, c)) as usize;
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

fn noc_oracle(trace: &[f64], th: f64, cap: usize) -> usize {
    for k in 1..=cap.min(trace.len()) {
        if trace[k - 1] >= th {
            return k;
        }
    }
    cap
}

fn encode_oracle(history: &[Click], h: usize, w: usize, radius: usize) -> (Mask, Mask) {
    let covered = |pol: Polarity| {
        Mask::from_fn(h, w, |r, c| {
            history.iter().any(|k| {
                let dr = r as i64 - k.row as i64;
                let dc = c as i64 - k.col as i64;
                k.polarity == pol && dr * dr + dc * dc <= (radius * radius) as i64
            })
        })
    };
    (covered(Polarity::Positive), covered(Polarity::Negative))
}

fn border_oracle(gt: &Mask, width: usize) -> Mask {
    let (h, w) = gt.dims();
    Mask::from_fn(h, w, |r, c| {
        !gt.get(r, c)
            && gt
                .ones()
                .any(|(gr, gc)| gr.abs_diff(r).max(gc.abs_diff(c)) <= width)
    })
}

fn check_attention() -> Outcome {
    let mut rng = rng(11);
    let mut cases = 0;
    let mut worst = 0.0f64;
    let mut run = |s: &Grid, q: &Grid, fg: &Mask| -> Result<(), String> {
        let got = flat(&attention_prior(&s.feature_map(), &q.feature_map(), fg).map_err(err)?);
        let want = attention_oracle(s, q, fg);
        worst = worst.max(max_abs_diff(&got, &want)?);
        cases += 1;
        Ok(())
    };
    // Every support foreground on 2×2 and 3×3 grids.
    for side in [2usize, 3] {
        let s = Grid::random(&mut rng, 4, side, side);
        let q = Grid::random(&mut rng, 4, 3, 4);
        for bits in 0..1u64 << (side * side) {
            run(&s, &q, &mask_from_bits(side, side, bits))?;
        }
    }
    // Random shapes up to 8×8, including zero-norm cells and a constant query.
    for i in 0..200 {
        let c = rng.random_range(1..6);
        let (hs, ws) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let (hq, wq) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let mut s = Grid::random(&mut rng, c, hs, ws);
        let mut q = Grid::random(&mut rng, c, hq, wq);
        if i % 7 == 0 {
            for ch in 0..c {
                s.v[ch * hs * ws] = 0.0;
                q.v[ch * hq * wq] = 0.0;
            }
        }
        if i % 11 == 0 {
            q.v.iter_mut().for_each(|v| *v = 0.5);
        }
        let p = rng.random_range(0.0..1.0);
        let fg = random_mask(&mut rng, hs, ws, p);
        run(&s, &q, &fg)?;
    }
    ensure!(worst <= TOL, "attention max |diff| {worst:.3e}");
    Ok(format!("attention {cases} cases {worst:.1e}"))
}

fn check_support_vector() -> Outcome {
    let mut rng = rng(12);
    let mut cases = 0;
    let mut worst = 0.0f64;
    // Every mask on a 4×4 grid.
    let feat = Grid::random(&mut rng, 3, 4, 4);
    let fm = feat.feature_map();
    for bits in 0..1u64 << 16 {
        let fg = mask_from_bits(4, 4, bits);
        let got = flat(&compute_support_vector(&fm, &fg).map_err(err)?);
        worst = worst.max(max_abs_diff(&got, &support_vector_oracle(&feat, &fg))?);
        cases += 1;
    }
    for _ in 0..200 {
        let (c, h, w) = (rng.random_range(1..8), rng.random_range(1..=8), rng.random_range(1..=8));
        let feat = Grid::random(&mut rng, c, h, w);
        let p = rng.random_range(0.0..1.0);
        let fg = random_mask(&mut rng, h, w, p);
        let got = flat(&compute_support_vector(&feat.feature_map(), &fg).map_err(err)?);
        worst = worst.max(max_abs_diff(&got, &support_vector_oracle(&feat, &fg))?);
        cases += 1;
    }
    ensure!(worst <= TOL, "support vector max |diff| {worst:.3e}");
    Ok(format!("support-vector {cases} cases {worst:.1e}"))
}

fn check_click_vector() -> Outcome {
    let cfg = ModelConfig::tiny(6, vec![2], 32);
    let model = Ifsenet::with_options(cfg.clone(), 5, Device::Cpu, DType::F64).map_err(err)?;
    let p = model.params();
    let weight = flat(p.get("support.click_reduce.weight").ok_or("no click_reduce.weight")?.as_tensor());
    let bias = flat(p.get("support.click_reduce.bias").ok_or("no click_reduce.bias")?.as_tensor());
    let in_ch = cfg.support_base_channels << cfg.pooling_depth;
    ensure!(
        weight.len() == in_ch * cfg.feature_channels && bias.len() == cfg.feature_channels,
        "unexpected click_reduce shape"
    );
    let mut rng = rng(13);
    let mut worst = 0.0f64;
    let mut cases = 0;
    for h in 1..=8 {
        for w in 1..=8 {
            let b = Grid::random(&mut rng, in_ch, h, w);
            let got = flat(
                &model
                    .compute_click_vector(&FeatureMap::new(b.tensor(), 64).map_err(err)?)
                    .map_err(err)?,
            );
            worst = worst.max(max_abs_diff(&got, &click_vector_oracle(&b, &weight, &bias))?);
            cases += 1;
        }
    }
    ensure!(worst <= TOL, "click vector max |diff| {worst:.3e}");
    Ok(format!("click-vector {cases} cases {worst:.1e}"))
}

fn check_loss() -> Outcome {
    let mut rng = rng(14);
    let mut worst = 0.0f64;
    let mut cases = 0;
    let logits = |g: &Grid| Logits::new(g.tensor()).unwrap();
    // Nearest resampling of every 3×3 mask to every size up to 8×8.
    for bits in 0..1u64 << 9 {
        let m = mask_from_bits(3, 3, bits);
        for h in 1..=8 {
            for w in 1..=8 {
                ensure!(
                    m.resize_nearest(h, w) == nearest_oracle(&m, h, w),
                    "nearest resample of {bits:#x} to {h}x{w}"
                );
            }
        }
    }
    for _ in 0..300 {
        let k = rng.random_range(1..4);
        let n = rng.random_range(1..4);
        let (h, w) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let scale = rng.random_range(0.5..30.0);
        let big = |rng: &mut rand_chacha::ChaCha8Rng, h, w| {
            let mut g = Grid::random(rng, 2, h, w);
            g.v.iter_mut().for_each(|v| *v *= scale);
            g
        };
        let supports: Vec<(Grid, Mask)> = (0..k)
            .map(|_| {
                let (sh, sw) = (rng.random_range(1..=8), rng.random_range(1..=8));
                let g = big(&mut rng, sh, sw);
                (g, random_mask(&mut rng, sh, sw, 0.5))
            })
            .collect();
        let inter: Vec<Grid> = (0..n)
            .map(|_| {
                let (ih, iw) = (rng.random_range(1..=8), rng.random_range(1..=8));
                big(&mut rng, ih, iw)
            })
            .collect();
        let last = big(&mut rng, h, w);
        let qm = random_mask(&mut rng, h, w, 0.4);
        let sl: Vec<Logits> = supports.iter().map(|(g, _)| logits(g)).collect();
        let sm: Vec<Mask> = supports.iter().map(|(_, m)| m.clone()).collect();
        let il: Vec<Logits> = inter.iter().map(logits).collect();
        let got = compute_loss(&sl, &sm, &il, &logits(&last), &qm)
            .map_err(err)?
            .to_scalar::<f64>()
            .map_err(err)?;
        let want = loss_oracle(&supports, &inter, &last, &qm);
        worst = worst.max((got - want).abs() / want.abs().max(1.0));
        cases += 1;
    }
    ensure!(worst <= TOL, "loss max rel diff {worst:.3e}");
    Ok(format!("loss {cases} cases {worst:.1e}"))
}

fn check_iou() -> Outcome {
    let mut cases = 0;
    for a in 0..1u64 << 9 {
        let ma = mask_from_bits(3, 3, a);
        for b in 0..1u64 << 9 {
            let mb = mask_from_bits(3, 3, b);
            let got = iou(&ma, &mb).map_err(err)?;
            let want = iou_oracle(&ma, &mb);
            ensure!((got - want).abs() <= TOL, "iou({a:#x}, {b:#x}) = {got}, oracle {want}");
            cases += 1;
        }
    }
    Ok(format!("iou {cases} pairs"))
}

fn check_noc() -> Outcome {
    let mut rng = rng(15);
    let levels = [0.0, 0.5, 0.84, 0.85, 0.86, 0.9, 1.0];
    for _ in 0..20_000 {
        let len = rng.random_range(0..25);
        let trace: Vec<f64> = (0..len).map(|_| levels[rng.random_range(0..levels.len())]).collect();
        let cap = rng.random_range(1..25);
        for th in [0.85, 0.9] {
            let (got, want) = (noc(&trace, th, cap), noc_oracle(&trace, th, cap));
            ensure!(got == want, "noc({trace:?}, {th}, {cap}) = {got}, oracle {want}");
        }
    }
    Ok("noc 40000 traces".into())
}

fn check_encode() -> Outcome {
    let mut cases = 0;
    // Every single click on every grid up to 6×6, radii 0..=3, both polarities.
    for h in 1..=6 {
        for w in 1..=6 {
            for radius in 0..=3 {
                for r in 0..h {
                    for c in 0..w {
                        for pol in [Polarity::Positive, Polarity::Negative] {
                            let hist = [Click::new(r, c, pol, 0)];
                            let got = encode_clicks(&hist, h, w, radius).map_err(err)?;
                            let (p, n) = encode_oracle(&hist, h, w, radius);
                            ensure!(got.positive == p && got.negative == n, "click {r},{c} r={radius} on {h}x{w}");
                            cases += 1;
                        }
                    }
                }
            }
        }
    }
    let mut rng = rng(16);
    for _ in 0..3000 {
        let (h, w) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let radius = rng.random_range(0..=4);
        let hist: Vec<Click> = (0..rng.random_range(0..6))
            .map(|i| {
                let pol = if rng.random_bool(0.5) { Polarity::Positive } else { Polarity::Negative };
                Click::new(rng.random_range(0..h), rng.random_range(0..w), pol, i)
            })
            .collect();
        let got = encode_clicks(&hist, h, w, radius).map_err(err)?;
        let (p, n) = encode_oracle(&hist, h, w, radius);
        ensure!(got.positive == p && got.negative == n, "history {hist:?} r={radius} on {h}x{w}");
        cases += 1;
    }
    Ok(format!("encode_clicks {cases} cases"))
}

fn check_border() -> Outcome {
    let mut cases = 0;
    for bits in 0..1u64 << 16 {
        let gt = mask_from_bits(4, 4, bits);
        for width in 0..=3 {
            ensure!(fg_border(&gt, width) == border_oracle(&gt, width), "border of {bits:#x} width {width}");
            cases += 1;
        }
    }
    let mut rng = rng(17);
    for _ in 0..2000 {
        let (h, w) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let p = rng.random_range(0.0..0.5);
        let gt = random_mask(&mut rng, h, w, p);
        let width = rng.random_range(0..=4);
        ensure!(fg_border(&gt, width) == border_oracle(&gt, width), "random border {h}x{w} width {width}");
        cases += 1;
    }
    Ok(format!("fg_border {cases} cases"))
}

pub fn run() -> Outcome {
    let parts = [
        check_attention(),
        check_support_vector(),
        check_click_vector(),
        check_loss(),
        check_iou(),
        check_noc(),
        check_encode(),
        check_border(),
    ];
    let mut details = Vec::new();
    for p in parts {
        details.push(p?);
    }
    Ok(format!("tol 1e-6: {}", details.join("; ")))
}
