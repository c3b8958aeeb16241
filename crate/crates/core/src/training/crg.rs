//! Coarse-stage training in two phases. First a generator is trained
//! adversarially against an internal critic; then, with the generator
//! frozen, an encoder learns to invert it from both sides: codes of
//! generated images (latent reconstruction) and reconstructions of real
//! images through the generator (image reconstruction).

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{batches, split_by_hash, EpochRecord, OutDir, Pipeline, TrainConfig, TrainReport, Transform};
use crate::error::{shape_err, Error, Result};
use crate::imaging::Image;
use crate::losses::{critic_loss, generator_adv_loss, mse, recon_loss_grad, sigmoid};
use crate::models::{build_critic, build_encoder, build_generator, ModelBundle};
use crate::nn::optim::Optimizer;
use crate::nn::{Mode, Sequential};
use crate::tensor::Tensor;

/// Smallest training set the CRG pipeline accepts.
pub const MIN_CRG_IMAGES: usize = 500;

fn latents(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..n * d).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::from_vec([n, d, 1, 1], data).expect("latent shape")
}

fn logits(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

/// Gradient of `mean softplus(sign · l)` with respect to each logit.
fn softplus_grad(l: &Tensor, sign: f64) -> Tensor {
    let n = l.len() as f64;
    l.map(|v| (sign * sigmoid(sign * v as f64) / n) as f32)
}

fn stack(images: &[(String, Image)], idx: &[usize], cfg: &TrainConfig, rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
    let mut rng = rng;
    let items: Vec<Tensor> = idx
        .iter()
        .map(|&i| {
            let img = &images[i].1;
            match rng.as_deref_mut() {
                Some(r) if !cfg.augment.is_off() => {
                    Transform::sample(&cfg.augment, img.height(), r).apply_image(img).to_tensor()
                }
                _ => img.to_tensor(),
            }
        })
        .collect();
    Tensor::stack(&items)
}

/// Mean L1 between `G(E(x))` and `x`, and MSE between `E(G(z))` and `z`,
/// over the validation set.
fn encoder_val(
    g: &Sequential,
    e: &Sequential,
    images: &[(String, Image)],
    val: &[usize],
    val_z: &Tensor,
    cfg: &TrainConfig,
) -> Result<(f64, f64)> {
    let mut l1 = 0.0;
    for chunk in val.chunks(cfg.batch_size) {
        let x = stack(images, chunk, cfg, None)?;
        let back = g.infer(&e.infer(&x)?)?;
        l1 += recon_loss_grad(&back, &x)?.0 * chunk.len() as f64;
    }
    let z_back = e.infer(&g.infer(val_z)?)?;
    Ok((l1 / val.len() as f64, mse(z_back.data(), val_z.data())))
}

/// Trains a generator and its encoder on `images` (keyed, at the bundle
/// resolution). The bundle returned holds those two networks only.
pub fn train_crg(cfg: &TrainConfig, images: &[(String, Image)]) -> Result<(ModelBundle, TrainReport)> {
    if cfg.pipeline != Pipeline::Crg {
        return Err(Error::Config(format!("expected a crg config, got {}", cfg.pipeline.name())));
    }
    cfg.validate()?;
    if images.len() < MIN_CRG_IMAGES {
        return Err(Error::Config(format!(
            "crg training needs at least {MIN_CRG_IMAGES} images, got {}",
            images.len()
        )));
    }
    let r = cfg.arch.resolution;
    if let Some((key, img)) = images.iter().find(|(_, i)| (i.height(), i.width()) != (r, r)) {
        return Err(shape_err!("{key} is {}x{}, expected {r}x{r}", img.height(), img.width()));
    }
    if cfg.encoder_epochs == 0 {
        return Err(Error::Config("encoder_epochs: must be at least 1".into()));
    }
    let start = Instant::now();
    let mut bundle = ModelBundle::empty(cfg.arch.clone())?;
    let d = cfg.arch.latent_dim;
    let keys: Vec<String> = images.iter().map(|(k, _)| k.clone()).collect();
    let (train, val) = split_by_hash(&keys, cfg.val_fraction, cfg.seed)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut g = build_generator(&cfg.arch, &mut rng);
    let mut critic = build_critic(&cfg.arch, &mut rng);
    let mut e = build_encoder(&cfg.arch, &mut rng);
    let val_z = latents(val.len().max(16), d, &mut rng);
    let out = OutDir::create(cfg)?;
    let mut report = TrainReport::new(Pipeline::Crg);
    let mut order = train.clone();

    let mut opt_g = Optimizer::new(cfg.optimizer.clone());
    let mut opt_c = Optimizer::new(cfg.optimizer.clone());
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum_g, mut sum_c, mut steps) = (0.0, 0.0, 0usize);
        for chunk in batches(&order, cfg.batch_size) {
            let real = stack(images, chunk, cfg, Some(&mut rng))?;
            let z = latents(chunk.len(), d, &mut rng);
            let (fake, g_tape) = g.forward(&z, Mode::Train(&mut rng))?;

            critic.zero_grad();
            let (lr_, t_real) = critic.forward(&real, Mode::Train(&mut rng))?;
            critic.backward(t_real, softplus_grad(&lr_, -1.0), false)?;
            let (lf, t_fake) = critic.forward(&fake, Mode::Train(&mut rng))?;
            critic.backward(t_fake, softplus_grad(&lf, 1.0), false)?;
            opt_c.step(cfg.lr, critic.trainable_mut());

            let (lg, t_gen) = critic.forward_eval(&fake, &[]).map(|(y, _, t)| (y, t))?;
            let dfake = critic.backward_input(t_gen, softplus_grad(&lg, -1.0))?;
            g.zero_grad();
            g.backward(g_tape, dfake, false)?;
            opt_g.step(cfg.lr, g.trainable_mut());

            let (gl, cl) = (generator_adv_loss(&logits(&lg)), critic_loss(&logits(&lr_), &logits(&lf)));
            if !(gl.is_finite() && cl.is_finite()) {
                return Err(Error::DegenerateInput(format!("gan losses diverged at epoch {epoch}")));
            }
            sum_g += gl;
            sum_c += cl;
            steps += 1;
        }
        let steps = steps.max(1) as f64;
        report.push(EpochRecord {
            epoch,
            phase: "gan".into(),
            train_loss: sum_g / steps,
            val_loss: None,
            lr: cfg.lr,
            metrics: BTreeMap::from([
                ("gen_adv".to_string(), sum_g / steps),
                ("critic_adv".to_string(), sum_c / steps),
            ]),
        });
    }
    bundle.generator = Some(g.clone());

    let mut opt_e = Optimizer::new(cfg.optimizer.clone());
    let mut best = e.clone();
    for epoch in 1..=cfg.encoder_epochs {
        order.shuffle(&mut rng);
        let (mut sum_lat, mut sum_img, mut steps) = (0.0, 0.0, 0usize);
        for chunk in batches(&order, cfg.batch_size) {
            let real = stack(images, chunk, cfg, Some(&mut rng))?;
            let z = latents(chunk.len(), d, &mut rng);
            let fake = g.infer(&z)?;
            e.zero_grad();

            let (z_hat, t_lat) = e.forward(&fake, Mode::Train(&mut rng))?;
            let lat = mse(z_hat.data(), z.data());
            let k = 2.0 / z.len() as f32;
            let dz = z_hat.zip_map(&z, |a, b| k * (a - b))?;
            e.backward(t_lat, dz, false)?;

            let (code, t_img) = e.forward(&real, Mode::Train(&mut rng))?;
            let (back, g_tape) = g.forward_eval(&code, &[]).map(|(y, _, t)| (y, t))?;
            let (img, dback) = recon_loss_grad(&back, &real)?;
            let dcode = g.backward_input(g_tape, dback)?;
            e.backward(t_img, dcode, false)?;
            opt_e.step(cfg.lr, e.trainable_mut());

            if !(lat.is_finite() && img.is_finite()) {
                return Err(Error::DegenerateInput(format!("encoder losses diverged at epoch {epoch}")));
            }
            sum_lat += lat;
            sum_img += img;
            steps += 1;
        }
        let steps = steps.max(1) as f64;
        let (val_img, val_lat) = encoder_val(&g, &e, images, &val, &val_z, cfg)?;
        let rec = EpochRecord {
            epoch,
            phase: "encoder".into(),
            train_loss: (sum_lat + sum_img) / steps,
            val_loss: Some(val_lat + val_img),
            lr: cfg.lr,
            metrics: BTreeMap::from([
                ("latent_recon".to_string(), sum_lat / steps),
                ("image_recon".to_string(), sum_img / steps),
                ("val_latent_recon".to_string(), val_lat),
                ("val_image_recon".to_string(), val_img),
            ]),
        };
        if report.push(rec.clone()) {
            best = e.clone();
            if let Some(o) = &out {
                let mut snapshot = bundle.clone();
                snapshot.encoder = Some(best.clone());
                o.save_best(&snapshot, &rec)?;
            }
        }
    }

    let mut last = bundle.clone();
    last.encoder = Some(e);
    bundle.encoder = Some(best);
    report.wall_clock_s = start.elapsed().as_secs_f64();
    if let Some(o) = &out {
        o.finish(&bundle, &last, &mut report)?;
    }
    Ok((bundle, report))
}
