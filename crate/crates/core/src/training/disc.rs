//! Artifact discriminator training: soft-label binary cross-entropy with
//! RMSprop, a plateau schedule and best-validation checkpointing.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{base_bundle, batches, split_by_hash, DiscDataset, EpochRecord, OutDir, Pipeline, TrainConfig, TrainReport, Transform};
use crate::distortion::LabeledSample;
use crate::error::{shape_err, Error, Result};
use crate::losses::{disc_loss, disc_loss_grad};
use crate::models::{build_discriminator, ModelBundle};
use crate::nn::optim::{Optimizer, PlateauSchedule};
use crate::nn::{Mode, Sequential};
use crate::tensor::Tensor;

const EVAL_BATCH: usize = 64;

/// Held-out quality of a discriminator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiscEval {
    pub loss: f64,
    /// Fraction of samples on the right side of 0.5.
    pub accuracy: f64,
    /// Mean score of high-label samples minus mean score of low-label ones.
    pub score_gap: f64,
    pub mean_real: f64,
    pub mean_fake: f64,
}

fn is_real(label: f32) -> bool {
    label > 0.5
}

fn scores(net: &Sequential, samples: &[&LabeledSample]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let x = Tensor::stack(&chunk.iter().map(|s| s.image.to_tensor()).collect::<Vec<_>>())?;
        out.extend(net.infer(&x)?.data().iter().map(|&v| v as f64));
    }
    Ok(out)
}

fn eval_refs(net: &Sequential, samples: &[&LabeledSample]) -> Result<DiscEval> {
    if samples.is_empty() {
        return Err(Error::DegenerateInput("no samples to evaluate".into()));
    }
    let s = scores(net, samples)?;
    let labels: Vec<f64> = samples.iter().map(|x| x.label as f64).collect();
    let loss = disc_loss(&s, &labels)?;
    let correct = s
        .iter()
        .zip(samples)
        .filter(|(v, x)| (**v > 0.5) == is_real(x.label))
        .count();
    let mean_of = |real: bool| {
        let v: Vec<f64> = s
            .iter()
            .zip(samples)
            .filter(|(_, x)| is_real(x.label) == real)
            .map(|(v, _)| *v)
            .collect();
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    let (mean_real, mean_fake) = (mean_of(true), mean_of(false));
    Ok(DiscEval {
        loss,
        accuracy: correct as f64 / samples.len() as f64,
        score_gap: mean_real - mean_fake,
        mean_real,
        mean_fake,
    })
}

/// Scores `samples` with the bundle's discriminator.
pub fn evaluate_discriminator(bundle: &ModelBundle, samples: &[LabeledSample]) -> Result<DiscEval> {
    let net = bundle
        .discriminator
        .as_ref()
        .ok_or_else(|| Error::Config("bundle has no artifact discriminator".into()))?;
    eval_refs(net, &samples.iter().collect::<Vec<_>>())
}

/// Trains an artifact discriminator on `data` and returns `base` (or an
/// empty bundle) carrying the best-validation weights.
pub fn train_discriminator(
    cfg: &TrainConfig,
    data: &DiscDataset,
    base: Option<ModelBundle>,
) -> Result<(ModelBundle, TrainReport)> {
    if cfg.pipeline != Pipeline::Discriminator {
        return Err(Error::Config(format!("expected a discriminator config, got {}", cfg.pipeline.name())));
    }
    cfg.validate()?;
    let start = Instant::now();
    let mut bundle = base_bundle(cfg, base)?;
    let r = bundle.arch.resolution;
    if data.keys.len() != data.samples.len() {
        return Err(shape_err!("{} keys for {} samples", data.keys.len(), data.samples.len()));
    }
    if let Some(bad) = data.samples.iter().position(|s| (s.image.height(), s.image.width()) != (r, r)) {
        return Err(shape_err!(
            "sample {} is {}x{}, discriminator works at {r}x{r}",
            data.keys[bad],
            data.samples[bad].image.height(),
            data.samples[bad].image.width()
        ));
    }
    let reals = data.samples.iter().filter(|s| is_real(s.label)).count();
    if reals == 0 || reals == data.len() {
        return Err(Error::Config(
            "discriminator data has a single label class; both clean and heavily distorted samples are needed".into(),
        ));
    }
    let (train, val) = split_by_hash(&data.keys, cfg.val_fraction, cfg.seed)?;
    let val_refs: Vec<&LabeledSample> = val.iter().map(|&i| &data.samples[i]).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = build_discriminator(&bundle.arch, &mut rng);
    let mut best = net.clone();
    let mut opt = Optimizer::new(cfg.optimizer.clone());
    let mut sched = cfg
        .lr_plateau
        .as_ref()
        .map(|p| PlateauSchedule::new(cfg.lr, p.patience, p.factor))
        .unwrap_or_else(|| PlateauSchedule::new(cfg.lr, 0, 2.0));
    let out = OutDir::create(cfg)?;
    let mut report = TrainReport::new(Pipeline::Discriminator);
    let mut order = train.clone();

    for epoch in 1..=cfg.epochs {
        let lr = sched.lr();
        order.shuffle(&mut rng);
        let (mut total, mut seen) = (0.0, 0usize);
        for batch in batches(&order, cfg.batch_size) {
            let mut items = Vec::with_capacity(batch.len());
            for &i in batch {
                let img = &data.samples[i].image;
                let t = if cfg.augment.is_off() {
                    Transform::IDENTITY
                } else {
                    Transform::sample(&cfg.augment, r, &mut rng)
                };
                items.push(t.apply_image(img).to_tensor());
            }
            let x = Tensor::stack(&items)?;
            let labels: Vec<f64> = batch.iter().map(|&i| data.samples[i].label as f64).collect();
            net.zero_grad();
            let (y, tape) = net.forward(&x, Mode::Train(&mut rng))?;
            let s: Vec<f64> = y.data().iter().map(|&v| v as f64).collect();
            let (loss, g) = disc_loss_grad(&s, &labels)?;
            if !loss.is_finite() {
                return Err(Error::DegenerateInput(format!("discriminator loss diverged at epoch {epoch}")));
            }
            let dy = Tensor::from_vec(y.shape(), g.iter().map(|&v| v as f32).collect())?;
            net.backward(tape, dy, false)?;
            opt.step(lr, net.trainable_mut());
            total += loss * batch.len() as f64;
            seen += batch.len();
        }
        let ev = eval_refs(&net, &val_refs)?;
        let rec = EpochRecord {
            epoch,
            phase: "train".into(),
            train_loss: total / seen.max(1) as f64,
            val_loss: Some(ev.loss),
            lr,
            metrics: BTreeMap::from([
                ("val_accuracy".to_string(), ev.accuracy),
                ("val_score_gap".to_string(), ev.score_gap),
            ]),
        };
        if report.push(rec.clone()) {
            best = net.clone();
            if let Some(o) = &out {
                let mut snapshot = bundle.clone();
                snapshot.discriminator = Some(best.clone());
                o.save_best(&snapshot, &rec)?;
            }
        }
        if sched.observe(ev.loss) {
            log::info!("discriminator lr reduced to {:.2e}", sched.lr());
        }
    }

    let mut last = bundle.clone();
    last.discriminator = Some(net);
    bundle.discriminator = Some(best);
    bundle.meta.insert("discriminator_epochs".into(), cfg.epochs.into());
    report.wall_clock_s = start.elapsed().as_secs_f64();
    if let Some(o) = &out {
        o.finish(&bundle, &last, &mut report)?;
    }
    Ok((bundle, report))
}
