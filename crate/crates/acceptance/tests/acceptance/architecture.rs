//! Shapes, the frozen backbone, gradient flow and support-order invariance.

use candle_core::{DType, Tensor};

use ifsenet::clicks::{encode_clicks, Click, ClickMasks, Polarity};
use ifsenet::dataset::fold_split;
use ifsenet::dataset::synthetic::{generate, SyntheticSpec};
use ifsenet::model::{compute_loss, Ifsenet, ModelConfig, ParamGroup, QueryInput, SupportInput};
use ifsenet::par::Execution;
use ifsenet::trainer::{TrainConfig, Trainer};
use ifsenet::{Mask, RgbImage};

use crate::common::{ensure, err, random_mask, rng, Outcome};
use rand::Rng;

fn noise_image(rng: &mut impl Rng, h: usize, w: usize) -> RgbImage {
    RgbImage::new(h, w, (0..h * w * 3).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

fn ellipse(h: usize, w: usize) -> Mask {
    Mask::from_fn(h, w, |r, c| {
        let y = (r as f64 - h as f64 / 2.0) / (h as f64 / 3.0);
        let x = (c as f64 - w as f64 / 2.0) / (w as f64 / 3.0);
        x * x + y * y <= 1.0
    })
}

fn clicks_on(h: usize, w: usize, radius: usize) -> ClickMasks {
    encode_clicks(
        &[
            Click::new(h / 2, w / 2, Polarity::Positive, 0),
            Click::new(2, 2, Polarity::Negative, 1),
        ],
        h,
        w,
        radius,
    )
    .unwrap()
}

fn check_shapes() -> Outcome {
    let mut rng = rng(31);
    // Feature grid is ceil(H/8) × ceil(W/8) with C channels.
    let tiny = Ifsenet::new(ModelConfig::tiny(64, vec![8, 4], 64), 1).map_err(err)?;
    for (h, w) in [(512, 384), (64, 64), (60, 44), (9, 17), (8, 8)] {
        let f = tiny.extract_features(&noise_image(&mut rng, h, w)).map_err(err)?;
        ensure!(f.stride == 8, "stride {}", f.stride);
        ensure!(
            f.dims() == (64, h.div_ceil(8), w.div_ceil(8)),
            "tiny features for {h}x{w}: {:?}",
            f.dims()
        );
    }
    let resnet = Ifsenet::new(ModelConfig::default(), 1).map_err(err)?;
    let f = resnet.extract_features(&noise_image(&mut rng, 64, 48)).map_err(err)?;
    ensure!(f.dims() == (256, 8, 6), "resnet features for 64x48: {:?}", f.dims());

    // Logits: two channels at the input resolution; n intermediate + 1 final.
    for n in 1..=4 {
        let bins: Vec<usize> = [8, 4, 2, 1][..n].to_vec();
        let model = Ifsenet::new(ModelConfig::tiny(16, bins, 64), 2).map_err(err)?;
        for (h, w) in [(64, 64), (60, 44)] {
            let img = noise_image(&mut rng, h, w);
            let clicks = clicks_on(h, w, 3);
            let prev = random_mask(&mut rng, h, w, 0.3);
            let out = model
                .forward(
                    &[SupportInput {
                        image: &img,
                        clicks: &clicks,
                        prev: &prev,
                    }],
                    &[QueryInput {
                        image: &img,
                        prev: &prev,
                    }],
                )
                .map_err(err)?;
            ensure!(out.supports[0].logits.data.dims() == [1, 2, h, w], "support logits {:?}", out.supports[0].logits.data.dims());
            let q = &out.queries[0];
            ensure!(q.final_logits.data.dims() == [1, 2, h, w], "query logits {:?}", q.final_logits.data.dims());
            ensure!(q.intermediate.len() == n, "{} intermediate outputs for n={n}", q.intermediate.len());
            for l in &q.intermediate {
                ensure!(l.data.dims()[..2] == [1, 2], "intermediate logits {:?}", l.data.dims());
            }
        }
    }
    Ok("stride-8 grids, 2-channel input-size logits, n+1 query outputs for n=1..4".into())
}

fn check_frozen_backbone() -> Outcome {
    let store = generate(&SyntheticSpec {
        images: 16,
        size: 48,
        classes: vec![6, 7],
        second_object: 0.3,
        seed: 4,
    });
    let model = Ifsenet::new(ModelConfig::tiny(16, vec![6, 3], 48), 3).map_err(err)?;
    let p = model.params();
    let backbone0 = p.fingerprint(ParamGroup::Backbone).map_err(err)?;
    let trainable0: Vec<u64> = [ParamGroup::Shared, ParamGroup::Support, ParamGroup::Query]
        .iter()
        .map(|&g| p.fingerprint(g).unwrap())
        .collect();
    let cfg = TrainConfig {
        batch: 2,
        lr: 0.01,
        execution: Execution::Sequential,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(&model, &store, fold_split(0).map_err(err)?, cfg).map_err(err)?;
    let order = trainer.epoch_order(0);
    for step in 0..10 {
        let batch: Vec<String> = (0..2).map(|i| order[(2 * step + i) % order.len()].clone()).collect();
        trainer.step(&batch, 0.01).map_err(err)?;
        ensure!(
            p.fingerprint(ParamGroup::Backbone).map_err(err)? == backbone0,
            "backbone changed at step {step}"
        );
    }
    let trainable1: Vec<u64> = [ParamGroup::Shared, ParamGroup::Support, ParamGroup::Query]
        .iter()
        .map(|&g| p.fingerprint(g).unwrap())
        .collect();
    ensure!(
        trainable0.iter().zip(&trainable1).all(|(a, b)| a != b),
        "some trainable group did not move in 10 steps"
    );
    Ok("backbone hash unchanged over 10 steps while trainable groups moved".into())
}

fn check_gradients() -> Outcome {
    let mut rng = rng(32);
    let (h, w) = (64, 64);
    let model = Ifsenet::with_options(
        ModelConfig::tiny(16, vec![8, 4], 64),
        4,
        candle_core::Device::Cpu,
        DType::F64,
    )
    .map_err(err)?;
    let gt = ellipse(h, w);
    let imgs: Vec<RgbImage> = (0..3).map(|_| noise_image(&mut rng, h, w)).collect();
    let clicks = clicks_on(h, w, 3);
    let prev = random_mask(&mut rng, h, w, 0.4);
    let supports: Vec<SupportInput<'_>> = imgs[..2]
        .iter()
        .map(|image| SupportInput {
            image,
            clicks: &clicks,
            prev: &prev,
        })
        .collect();
    let out = model
        .forward(
            &supports,
            &[QueryInput {
                image: &imgs[2],
                prev: &prev,
            }],
        )
        .map_err(err)?;
    let q = &out.queries[0];
    let logits: Vec<_> = out.supports.iter().map(|s| s.logits.clone()).collect();
    let loss = compute_loss(&logits, &[gt.clone(), gt.clone()], &q.intermediate, &q.final_logits, &gt)
        .map_err(err)?;
    let grads = loss.backward().map_err(err)?;
    let mut missing = Vec::new();
    let trainable = model.params().trainable();
    for (name, var) in &trainable {
        let reached = match grads.get(var.as_tensor()) {
            Some(g) => g.abs().and_then(|a| a.sum_all()).and_then(|s| s.to_scalar::<f64>()).map_err(err)? > 0.0,
            None => false,
        };
        if !reached {
            missing.push(*name);
        }
    }
    ensure!(missing.is_empty(), "no gradient for {missing:?}");
    for (name, var) in model.params().group(ParamGroup::Backbone) {
        if let Some(g) = grads.get(var.as_tensor()) {
            let s = g.abs().and_then(|a| a.sum_all()).and_then(|s| s.to_scalar::<f64>()).map_err(err)?;
            ensure!(s == 0.0, "backbone parameter {name} received gradient");
        }
    }
    Ok(format!("all {} trainable tensors receive nonzero gradient, backbone none", trainable.len()))
}

fn check_permutation() -> Outcome {
    let mut rng = rng(33);
    let (h, w) = (64, 64);
    let model = Ifsenet::new(ModelConfig::tiny(16, vec![8, 4], 64), 5).map_err(err)?;
    let imgs: Vec<RgbImage> = (0..4).map(|_| noise_image(&mut rng, h, w)).collect();
    let clicks: Vec<ClickMasks> = (0..3)
        .map(|i| {
            encode_clicks(
                &[Click::new(10 + 10 * i, 20 + 5 * i, Polarity::Positive, 0)],
                h,
                w,
                3,
            )
            .unwrap()
        })
        .collect();
    let prevs: Vec<Mask> = (0..4).map(|_| random_mask(&mut rng, h, w, 0.3)).collect();
    let run = |order: [usize; 3]| -> Result<Tensor, String> {
        let supports: Vec<SupportInput<'_>> = order
            .iter()
            .map(|&i| SupportInput {
                image: &imgs[i],
                clicks: &clicks[i],
                prev: &prevs[i],
            })
            .collect();
        let out = model
            .forward(
                &supports,
                &[QueryInput {
                    image: &imgs[3],
                    prev: &prevs[3],
                }],
            )
            .map_err(err)?;
        Ok(out.queries[0].final_logits.data.clone())
    };
    let base = run([0, 1, 2])?;
    let mut worst = 0.0f64;
    for order in [[0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]] {
        let d = (run(order)? - &base)
            .and_then(|d| d.abs())
            .and_then(|d| d.max_all())
            .and_then(|d| d.to_dtype(DType::F64))
            .and_then(|d| d.to_scalar::<f64>())
            .map_err(err)?;
        worst = worst.max(d);
    }
    ensure!(worst <= 1e-6, "query logits differ by {worst:.3e} across support orders");
    Ok(format!("6 orders of 3 supports, max |diff| {worst:.1e}"))
}

pub fn run() -> Outcome {
    let parts = [check_shapes(), check_frozen_backbone(), check_gradients(), check_permutation()];
    let mut details = Vec::new();
    for p in parts {
        details.push(p?);
    }
    Ok(details.join("; "))
}
