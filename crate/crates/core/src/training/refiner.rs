//! Refiner training: coarse composites produced by the cyclic engine are
//! paired with their originals, and the Unet learns to repair the hole under
//! the reconstruction-plus-style objective.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{base_bundle, batches, split_by_hash, EpochRecord, OutDir, Pipeline, RefinerSample, TrainConfig, TrainReport, Transform};
use crate::engine::{inpaint, InpaintRequest};
use crate::error::{shape_err, Error, Result};
use crate::imaging::{compose_cycle_input, gen_mask, FillPolicy, Image, MaskSpec};
use crate::losses::{joint_loss_grad, joint_terms, FeatureExtractor, JointTerms};
use crate::models::{ModelBundle, Refiner};
use crate::nn::optim::{Optimizer, PlateauSchedule};
use crate::tensor::Tensor;

/// Brings a refiner-resolution image down to the bundle resolution.
fn to_bundle_res(img: &Image, r: usize) -> Result<Image> {
    let rr = img.height();
    if rr == r {
        Ok(img.clone())
    } else if rr > r && rr % r == 0 {
        img.downsample_box(rr / r)
    } else {
        Ok(img.resize_bilinear(r, r))
    }
}

/// Runs the coarse stage of `bundle` over `images` (keyed, at the refiner
/// resolution) with random brush masks and rotating fill policies, and
/// returns the refiner training triples. Image `i` uses seed `seed + i`.
pub fn build_refiner_samples(
    bundle: &ModelBundle,
    images: &[(String, Image)],
    cfg: &TrainConfig,
) -> Result<Vec<RefinerSample>> {
    if bundle.generator.is_none() || bundle.encoder.is_none() {
        return Err(Error::Config(
            "refiner data needs a bundle with a trained generator and encoder".into(),
        ));
    }
    let (r, rr) = (bundle.arch.resolution, cfg.arch.refiner_resolution);
    let (lo, hi) = cfg.refiner_data.coverage;
    images
        .iter()
        .enumerate()
        .map(|(i, (key, org))| {
            if (org.height(), org.width()) != (rr, rr) {
                return Err(shape_err!("{key} is {}x{}, expected {rr}x{rr}", org.height(), org.width()));
            }
            let seed = cfg.seed.wrapping_add(i as u64);
            let small = to_bundle_res(org, r)?;
            let mask = gen_mask(r, &MaskSpec::brush(lo, hi), seed)?;
            let fill = match i % 4 {
                0 => FillPolicy::Mean,
                1 => FillPolicy::noise(seed),
                2 => FillPolicy::white(),
                _ => FillPolicy::black(),
            };
            let mut req = InpaintRequest::new(small, mask.clone(), fill);
            req.cycles = cfg.refiner_data.cycles;
            req.use_discriminator = bundle.discriminator.is_some();
            req.refine = false;
            req.seed = seed;
            let res = inpaint(bundle, &req)?;
            let coarse = match res.coarse {
                Some(c) => c,
                None => res.trace.cycles.last().expect("at least one cycle").composite.clone(),
            };
            let mask_rr = mask.resize_nearest(rr, rr);
            let crg = compose_cycle_input(org, &mask_rr, &coarse.resize_bilinear(rr, rr))?;
            Ok(RefinerSample {
                key: key.clone(),
                crg,
                mask: mask_rr,
                org: org.clone(),
            })
        })
        .collect()
}

struct Batch {
    crg: Tensor,
    mask: Tensor,
    org: Tensor,
}

fn make_batch(
    samples: &[RefinerSample],
    idx: &[usize],
    cfg: &TrainConfig,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Batch> {
    let (mut crg, mut mask, mut org) = (Vec::new(), Vec::new(), Vec::new());
    let mut rng = rng;
    for &i in idx {
        let s = &samples[i];
        let t = match rng.as_deref_mut() {
            Some(r) if !cfg.augment.is_off() => Transform::sample(&cfg.augment, s.crg.height(), r),
            _ => Transform::IDENTITY,
        };
        crg.push(t.apply_image(&s.crg).to_tensor());
        mask.push(t.apply_mask(&s.mask).to_tensor());
        org.push(t.apply_image(&s.org).to_tensor());
    }
    Ok(Batch {
        crg: Tensor::stack(&crg)?,
        mask: Tensor::stack(&mask)?,
        org: Tensor::stack(&org)?,
    })
}

fn validate(refiner: &Refiner, samples: &[RefinerSample], idx: &[usize], fx: &FeatureExtractor, cfg: &TrainConfig) -> Result<JointTerms> {
    let mut sum = [0.0f64; 3];
    for chunk in idx.chunks(cfg.batch_size) {
        let b = make_batch(samples, chunk, cfg, None)?;
        let u = refiner.infer(&b.crg)?;
        let t = joint_terms(&u, &b.crg, &b.org, &b.mask, fx, None)?;
        let k = chunk.len() as f64;
        sum[0] += t.recon * k;
        sum[1] += t.style_unet * k;
        sum[2] += t.style_comp * k;
    }
    let n = idx.len() as f64;
    let recon = sum[0] / n;
    let (su, sc) = (sum[1] / n, sum[2] / n);
    Ok(JointTerms {
        recon,
        style_unet: su,
        style_comp: sc,
        total: recon + crate::losses::STYLE_WEIGHT * (su + sc),
    })
}

/// Trains the refiner on prepared triples and returns `base` (or an empty
/// bundle) carrying the best-validation weights.
pub fn train_refiner(
    cfg: &TrainConfig,
    samples: &[RefinerSample],
    base: Option<ModelBundle>,
) -> Result<(ModelBundle, TrainReport)> {
    if cfg.pipeline != Pipeline::Refiner {
        return Err(Error::Config(format!("expected a refiner config, got {}", cfg.pipeline.name())));
    }
    cfg.validate()?;
    let start = Instant::now();
    let mut bundle = base_bundle(cfg, base)?;
    let rr = bundle.arch.refiner_resolution;
    if let Some(bad) = samples.iter().find(|s| {
        [s.crg.height(), s.crg.width(), s.org.height(), s.org.width(), s.mask.height(), s.mask.width()]
            .iter()
            .any(|&d| d != rr)
    }) {
        return Err(shape_err!("refiner sample {} is not {rr}x{rr}", bad.key));
    }
    let fx = FeatureExtractor::<f32>::build(&cfg.extractor)?;
    if rr < fx.min_size() {
        return Err(Error::Config(format!("refiner resolution {rr} is below the extractor minimum {}", fx.min_size())));
    }
    let keys: Vec<String> = samples.iter().map(|s| s.key.clone()).collect();
    let (train, val) = split_by_hash(&keys, cfg.val_fraction, cfg.seed)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = Refiner::new(bundle.arch.refiner_width, &mut rng);
    let mut best = net.clone();
    let mut opt = Optimizer::new(cfg.optimizer.clone());
    let mut sched = match &cfg.lr_plateau {
        Some(p) => PlateauSchedule::new(cfg.lr, p.patience, p.factor),
        None => PlateauSchedule::new(cfg.lr, 0, 2.0),
    };
    let out = OutDir::create(cfg)?;
    let mut report = TrainReport::new(Pipeline::Refiner);
    let mut order = train.clone();

    for epoch in 1..=cfg.epochs {
        let lr = sched.lr();
        order.shuffle(&mut rng);
        let (mut total, mut seen) = (0.0, 0usize);
        for chunk in batches(&order, cfg.batch_size) {
            let b = make_batch(samples, chunk, cfg, Some(&mut rng))?;
            net.zero_grad();
            let (u, tape) = net.forward_train(&b.crg, &mut rng)?;
            let (terms, grad) = joint_loss_grad(&u, &b.crg, &b.org, &b.mask, &fx, None)?;
            if !terms.total.is_finite() {
                return Err(Error::DegenerateInput(format!("refiner loss diverged at epoch {epoch}")));
            }
            net.backward(tape, grad)?;
            opt.step(lr, net.trainable_mut());
            total += terms.total * chunk.len() as f64;
            seen += chunk.len();
        }
        let v = validate(&net, samples, &val, &fx, cfg)?;
        let rec = EpochRecord {
            epoch,
            phase: "train".into(),
            train_loss: total / seen.max(1) as f64,
            val_loss: Some(v.total),
            lr,
            metrics: BTreeMap::from([
                ("val_recon".to_string(), v.recon),
                ("val_style_unet".to_string(), v.style_unet),
                ("val_style_comp".to_string(), v.style_comp),
            ]),
        };
        if report.push(rec.clone()) {
            best = net.clone();
            if let Some(o) = &out {
                let mut snapshot = bundle.clone();
                snapshot.refiner = Some(best.clone());
                o.save_best(&snapshot, &rec)?;
            }
        }
        sched.observe(v.total);
    }

    let mut last = bundle.clone();
    last.refiner = Some(net);
    bundle.refiner = Some(best);
    bundle
        .meta
        .insert("style_extractor".into(), fx.provenance().to_string().into());
    report.wall_clock_s = start.elapsed().as_secs_f64();
    if let Some(o) = &out {
        o.finish(&bundle, &last, &mut report)?;
    }
    Ok((bundle, report))
}
