//! Training objectives: Gram style loss, per-pixel reconstruction, the
//! refiner's joint loss with its analytic input gradient, soft-label
//! cross-entropy for the artifact discriminator, and the CRG losses.
//!
//! Batched variants average per-item losses over the batch, so a batch of
//! one reproduces the single-image definitions exactly.

mod features;

use crate::error::{shape_err, Result};
use crate::imaging::{Image, Mask};
use crate::nn::Sequential;
use crate::tensor::{Float, Tensor};

pub use features::{ExtractorSpec, FeatureExtractor, FeatureStack, IMAGENET_MEAN, IMAGENET_STD};

/// Weight on the two style terms of the joint loss.
pub const STYLE_WEIGHT: f64 = 150.0;
/// Scores are clamped to `[ε, 1 − ε]` before taking logarithms.
pub const BCE_EPSILON: f64 = 1e-7;

fn sign<T: Float>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Unnormalised Gram matrix (row-major `C×C`) of batch item `n`.
pub fn gram<T: Float>(act: &Tensor<T>, n: usize) -> Vec<T> {
    let c = act.channels();
    let hw = act.height() * act.width();
    let a = act.item(n);
    let mut g = vec![T::zero(); c * c];
    T::gemm(c, hw, c, T::one(), a, (hw, 1), a, (1, hw), T::zero(), &mut g, (c, 1));
    g
}

fn check_stacks<T: Float>(a: &[Tensor<T>], b: &[Tensor<T>]) -> Result<()> {
    if a.len() != b.len() {
        return Err(shape_err!("feature stacks have {} and {} maps", a.len(), b.len()));
    }
    for (j, (x, y)) in a.iter().zip(b).enumerate() {
        if x.shape() != y.shape() {
            return Err(shape_err!("feature map {j}: {:?} vs {:?}", x.shape(), y.shape()));
        }
    }
    Ok(())
}

/// `Σ_j (1/C_j²)·‖K_j·(G(a_j) − G(b_j))‖₁` with `K_j = 1/(C_j·H_j·W_j)`.
pub fn style_loss<T: Float>(a: &[Tensor<T>], b: &[Tensor<T>]) -> Result<f64> {
    style_impl(a, b, false).map(|(l, _)| l)
}

/// Style loss and its gradient with respect to `a` (`b` held constant).
pub fn style_loss_grad<T: Float>(a: &[Tensor<T>], b: &[Tensor<T>]) -> Result<(f64, FeatureStack<T>)> {
    style_impl(a, b, true)
}

fn style_impl<T: Float>(a: &[Tensor<T>], b: &[Tensor<T>], want_grad: bool) -> Result<(f64, FeatureStack<T>)> {
    check_stacks(a, b)?;
    let mut total = 0.0;
    let mut grads = Vec::new();
    for (fa, fb) in a.iter().zip(b) {
        let [n, c, h, w] = fa.shape();
        let hw = h * w;
        let k = 1.0 / (c * hw) as f64;
        let outer = 1.0 / (c * c) as f64;
        let mut grad = if want_grad { Tensor::zeros(fa.shape()) } else { Tensor::zeros([0, 0, 0, 0]) };
        for item in 0..n {
            let ga = gram(fa, item);
            let gb = gram(fb, item);
            let mut s = T::zero();
            let mut signs = Vec::with_capacity(if want_grad { c * c } else { 0 });
            for (x, y) in ga.iter().zip(&gb) {
                let d = *x - *y;
                s += d.abs();
                if want_grad {
                    signs.push(sign(d));
                }
            }
            total += outer * k * s.to_f64_lossy() / n as f64;
            if want_grad {
                // dL/dA = (S + Sᵀ)·A with S = coef·sign(D); D is symmetric
                let coef = T::from_f64_lossy(2.0 * outer * k / n as f64);
                T::gemm(
                    c,
                    c,
                    hw,
                    coef,
                    &signs,
                    (c, 1),
                    fa.item(item),
                    (hw, 1),
                    T::zero(),
                    grad.item_mut(item),
                    (hw, 1),
                );
            }
        }
        grads.push(grad);
    }
    Ok((total, grads))
}

/// Mean absolute error over every element.
pub fn recon_loss(i_unet: &Image, i_org: &Image) -> Result<f64> {
    recon_loss_grad::<f64>(&i_unet.to_tensor(), &i_org.to_tensor()).map(|(l, _)| l)
}

/// Mean absolute error and its gradient with respect to `u`.
pub fn recon_loss_grad<T: Float>(u: &Tensor<T>, target: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    if u.shape() != target.shape() {
        return Err(shape_err!("reconstruction: {:?} vs {:?}", u.shape(), target.shape()));
    }
    let n = u.len() as f64;
    let loss = u
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (*a - *b).abs().to_f64_lossy())
        .sum::<f64>()
        / n;
    let inv = T::from_f64_lossy(1.0 / n);
    let grad = u.zip_map(target, |a, b| sign(a - b) * inv)?;
    Ok((loss, grad))
}

/// Tensor form of the refined composite: `crg` where `mask` is 1, `u` elsewhere.
/// `mask` is `[n, 1, H, W]` of exact 0/1 values.
pub fn compose_tensor<T: Float>(crg: &Tensor<T>, mask: &Tensor<T>, u: &Tensor<T>) -> Result<Tensor<T>> {
    check_mask(crg, mask)?;
    if crg.shape() != u.shape() {
        return Err(shape_err!("compose: {:?} vs {:?}", crg.shape(), u.shape()));
    }
    let [n, c, h, w] = u.shape();
    let hw = h * w;
    let mut out = u.clone();
    for item in 0..n {
        let m = mask.item(item);
        let known = crg.item(item);
        let dst = out.item_mut(item);
        for ch in 0..c {
            for p in 0..hw {
                if m[p] != T::zero() {
                    dst[ch * hw + p] = known[ch * hw + p];
                }
            }
        }
    }
    Ok(out)
}

fn check_mask<T: Float>(img: &Tensor<T>, mask: &Tensor<T>) -> Result<()> {
    let [n, _, h, w] = img.shape();
    if mask.shape() != [n, 1, h, w] {
        return Err(shape_err!("mask tensor {:?} does not match image {:?}", mask.shape(), img.shape()));
    }
    Ok(())
}

/// The three components of the joint loss and their weighted sum.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JointTerms {
    pub recon: f64,
    pub style_unet: f64,
    pub style_comp: f64,
    pub total: f64,
}

impl JointTerms {
    fn new(recon: f64, style_unet: f64, style_comp: f64) -> Self {
        Self {
            recon,
            style_unet,
            style_comp,
            total: recon + STYLE_WEIGHT * (style_unet + style_comp),
        }
    }
}

/// Refiner objective on single images.
pub fn joint_loss<T: Float>(
    i_unet: &Image,
    i_crg: &Image,
    i_org: &Image,
    m: &Mask,
    fx: &FeatureExtractor<T>,
) -> Result<f64> {
    let terms = joint_terms(&i_unet.to_tensor(), &i_crg.to_tensor(), &i_org.to_tensor(), &m.to_tensor(), fx, None)?;
    Ok(terms.total)
}

/// Joint loss terms on batched tensors. `org_features`, when given, must be
/// `fx.extract(org)` and saves recomputing it.
pub fn joint_terms<T: Float>(
    u: &Tensor<T>,
    crg: &Tensor<T>,
    org: &Tensor<T>,
    mask: &Tensor<T>,
    fx: &FeatureExtractor<T>,
    org_features: Option<&FeatureStack<T>>,
) -> Result<JointTerms> {
    let comp = compose_tensor(crg, mask, u)?;
    let owned;
    let fo = match org_features {
        Some(f) => f,
        None => {
            owned = fx.extract(org)?;
            &owned
        }
    };
    let (recon, _) = recon_loss_grad(u, org)?;
    let su = style_loss(&fx.extract(u)?, fo)?;
    let sc = style_loss(&fx.extract(&comp)?, fo)?;
    Ok(JointTerms::new(recon, su, sc))
}

/// Joint loss terms and the gradient of the total with respect to `u`.
pub fn joint_loss_grad<T: Float>(
    u: &Tensor<T>,
    crg: &Tensor<T>,
    org: &Tensor<T>,
    mask: &Tensor<T>,
    fx: &FeatureExtractor<T>,
    org_features: Option<&FeatureStack<T>>,
) -> Result<(JointTerms, Tensor<T>)> {
    let comp = compose_tensor(crg, mask, u)?;
    let owned;
    let fo = match org_features {
        Some(f) => f,
        None => {
            owned = fx.extract(org)?;
            &owned
        }
    };
    let (recon, mut grad) = recon_loss_grad(u, org)?;
    let weight = T::from_f64_lossy(STYLE_WEIGHT);

    let (fu, tape_u) = fx.extract_traced(u)?;
    let (su, mut gu) = style_loss_grad(&fu, fo)?;
    gu.iter_mut().for_each(|g| g.scale(weight));
    grad.add_assign(&fx.backward(tape_u, gu)?)?;

    let (fc, tape_c) = fx.extract_traced(&comp)?;
    let (sc, mut gc) = style_loss_grad(&fc, fo)?;
    gc.iter_mut().for_each(|g| g.scale(weight));
    let dcomp = fx.backward(tape_c, gc)?;
    // the composite depends on u only in the hole
    let [n, c, h, w] = u.shape();
    let hw = h * w;
    for item in 0..n {
        let m = mask.item(item);
        let d = dcomp.item(item);
        let g = grad.item_mut(item);
        for ch in 0..c {
            for p in 0..hw {
                if m[p] == T::zero() {
                    g[ch * hw + p] += d[ch * hw + p];
                }
            }
        }
    }
    Ok((JointTerms::new(recon, su, sc), grad))
}

fn check_pairs(scores: &[f64], labels: &[f64]) -> Result<()> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(shape_err!("{} scores vs {} labels", scores.len(), labels.len()));
    }
    Ok(())
}

/// Mean binary cross-entropy against soft targets.
pub fn disc_loss(scores: &[f64], labels: &[f64]) -> Result<f64> {
    disc_loss_grad(scores, labels).map(|(l, _)| l)
}

/// Cross-entropy and its gradient with respect to each score.
pub fn disc_loss_grad(scores: &[f64], labels: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_pairs(scores, labels)?;
    let n = scores.len() as f64;
    let mut loss = 0.0;
    let grads = scores
        .iter()
        .zip(labels)
        .map(|(&s, &t)| {
            let s = if s.is_nan() { 0.5 } else { s.clamp(BCE_EPSILON, 1.0 - BCE_EPSILON) };
            loss -= t * s.ln() + (1.0 - t) * (1.0 - s).ln();
            (s - t) / (s * (1.0 - s)) / n
        })
        .collect();
    Ok((loss / n, grads))
}

/// `ln(1 + eˣ)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Losses of the encoder/generator pair and the internal GAN critic.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CrgLosses {
    pub gen_adv: f64,
    pub disc_adv: f64,
    pub latent_recon: f64,
    pub image_recon: f64,
}

/// Non-saturating critic loss on logits: `mean softplus(−real) + mean softplus(fake)`.
pub fn critic_loss(real_logits: &[f64], fake_logits: &[f64]) -> f64 {
    mean(real_logits.iter().map(|&l| softplus(-l))) + mean(fake_logits.iter().map(|&l| softplus(l)))
}

/// Non-saturating generator loss: `mean softplus(−fake)`.
pub fn generator_adv_loss(fake_logits: &[f64]) -> f64 {
    mean(fake_logits.iter().map(|&l| softplus(-l)))
}

fn mean(it: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = it.len();
    if n == 0 {
        0.0
    } else {
        it.sum::<f64>() / n as f64
    }
}

/// Mean squared error over every element.
pub fn mse(a: &[f32], b: &[f32]) -> f64 {
    let n = a.len().max(1) as f64;
    a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>() / n
}

/// Evaluates all four CRG losses in inference mode. `real` is `[n, 3, R, R]`,
/// `z` is `[m, d, 1, 1]`.
pub fn crg_training_losses(
    generator: &Sequential,
    encoder: &Sequential,
    critic: &Sequential,
    real: &Tensor,
    z: &Tensor,
) -> Result<CrgLosses> {
    let fake = generator.infer(z)?;
    let real_logits: Vec<f64> = critic.infer(real)?.data().iter().map(|&v| v as f64).collect();
    let fake_logits: Vec<f64> = critic.infer(&fake)?.data().iter().map(|&v| v as f64).collect();
    let z_back = encoder.infer(&fake)?;
    if z_back.len() != z.len() {
        return Err(shape_err!("encoder emits {} values for {} latents", z_back.len(), z.len()));
    }
    let x_back = generator.infer(&encoder.infer(real)?)?;
    let (image_recon, _) = recon_loss_grad(&x_back, real)?;
    Ok(CrgLosses {
        gen_adv: generator_adv_loss(&fake_logits),
        disc_adv: critic_loss(&real_logits, &fake_logits),
        latent_recon: mse(z_back.data(), z.data()),
        image_recon,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn constant(v: f64, h: usize, w: usize) -> Tensor<f64> {
        Tensor::full([1, 1, h, w], v)
    }

    #[test]
    fn gram_closed_forms() {
        assert!(gram(&Tensor::<f64>::zeros([1, 3, 4, 4]), 0).iter().all(|&v| v == 0.0));
        assert_eq!(gram(&constant(1.5, 3, 5), 0), vec![1.5 * 1.5 * 15.0]);
        let a = random([1, 2, 2, 2], 1);
        let g = gram(&a, 0);
        for i in 0..2 {
            for j in 0..2 {
                let want: f64 = (0..4).map(|p| a.item(0)[i * 4 + p] * a.item(0)[j * 4 + p]).sum();
                assert!((g[i * 2 + j] - want).abs() <= 1e-12 * want.abs().max(1.0));
            }
        }
    }

    #[test]
    fn style_closed_form_on_constant_maps() {
        let (v, w) = (0.7, -0.3);
        let l = style_loss(&[constant(v, 4, 6)], &[constant(w, 4, 6)]).unwrap();
        assert!((l - (v * v - w * w).abs()).abs() < 1e-12);
        // scaling both maps: |k_a² v² − k_b² w²|
        let l = style_loss(&[constant(2.0 * v, 4, 6)], &[constant(3.0 * w, 4, 6)]).unwrap();
        assert!((l - (4.0 * v * v - 9.0 * w * w).abs()).abs() < 1e-12);
        assert!(style_loss(&[constant(v, 4, 6)], &[constant(w, 4, 5)]).is_err());
    }

    #[test]
    fn recon_closed_forms() {
        let a = Image::filled(4, 4, [0.2, 0.2, 0.2]);
        let b = Image::filled(4, 4, [0.3, 0.3, 0.3]);
        assert!((recon_loss(&a, &b).unwrap() - 0.1).abs() < 1e-7);
        assert_eq!(recon_loss(&a, &a).unwrap(), 0.0);
        let mut data = a.data().to_vec();
        data[5] += 0.5;
        let c = Image::new(4, 4, data).unwrap();
        assert!((recon_loss(&a, &c).unwrap() - 0.5 / 48.0).abs() < 1e-7);
    }

    #[test]
    fn disc_loss_scalars() {
        let l = disc_loss(&[0.9], &[0.9]).unwrap();
        assert!((l - 0.325_082_973_391_448_2).abs() < 1e-9, "{l}");
        for t in [0.1, 0.9] {
            assert!((disc_loss(&[0.5], &[t]).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        }
        assert!(disc_loss(&[0.0, 1.0], &[0.9, 0.1]).unwrap().is_finite());
        assert!(disc_loss(&[0.5], &[]).is_err());
    }

    #[test]
    fn joint_loss_identities() {
        let fx = FeatureExtractor::<f64>::toy(3);
        let img = Image::from_fn(16, 16, |c, y, x| ((c * 7 + y * 3 + x) % 13) as f32 / 6.5 - 1.0);
        let m = Mask::from_fn(16, 16, |y, x| !(4..10).contains(&y) || !(5..12).contains(&x));
        assert_eq!(joint_loss(&img, &img, &img, &m, &fx).unwrap(), 0.0);

        let other = Image::from_fn(16, 16, |c, y, x| ((c + y * x) % 5) as f32 / 5.0 - 0.5);
        let crg = Image::from_fn(16, 16, |c, y, x| ((2 * c + y + 3 * x) % 9) as f32 / 9.0 - 0.3);
        let ones = Mask::ones(16, 16);
        let fo = fx.extract_image(&img).unwrap();
        let expect = recon_loss(&other, &img).unwrap()
            + STYLE_WEIGHT
                * (style_loss(&fx.extract_image(&other).unwrap(), &fo).unwrap()
                    + style_loss(&fx.extract_image(&crg).unwrap(), &fo).unwrap());
        let got = joint_loss(&other, &crg, &img, &ones, &fx).unwrap();
        assert!((got - expect).abs() <= 1e-12 * expect);
    }

    #[test]
    fn crg_losses_are_finite_and_positive() {
        let arch = crate::models::ArchConfig {
            resolution: 32,
            latent_dim: 8,
            base_channels: 4,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = crate::models::build_generator(&arch, &mut rng);
        let e = crate::models::build_encoder(&arch, &mut rng);
        let d = crate::models::build_critic(&arch, &mut rng);
        let real = Tensor::stack(&[crate::synth::synth_face(32, 1).to_tensor(), crate::synth::synth_face(32, 2).to_tensor()])
            .unwrap();
        let z = random([2, 8, 1, 1], 4).cast::<f32>();
        let l = crg_training_losses(&g, &e, &d, &real, &z).unwrap();
        for v in [l.gen_adv, l.disc_adv, l.latent_recon, l.image_recon] {
            assert!(v.is_finite() && v > 0.0, "{l:?}");
        }
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        assert!(softplus(-800.0) >= 0.0);
        assert!((sigmoid(-800.0)).abs() < 1e-300 && sigmoid(800.0) == 1.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn gram_is_symmetric_psd(seed in any::<u64>(), c in 1usize..5, h in 1usize..5) {
            let a = random([1, c, h, 3], seed);
            let g = gram(&a, 0);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
            let v: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut quad = 0.0;
            for i in 0..c {
                for j in 0..c {
                    prop_assert!((g[i * c + j] - g[j * c + i]).abs() < 1e-12);
                    quad += v[i] * g[i * c + j] * v[j];
                }
            }
            prop_assert!(quad >= -1e-9);
        }

        #[test]
        fn style_and_recon_are_nonnegative(seed in any::<u64>()) {
            let a = vec![random([1, 3, 4, 4], seed), random([1, 5, 2, 2], seed ^ 7)];
            let b = vec![random([1, 3, 4, 4], seed ^ 3), random([1, 5, 2, 2], seed ^ 9)];
            prop_assert!(style_loss(&a, &b).unwrap() >= 0.0);
            prop_assert_eq!(style_loss(&a, &a).unwrap(), 0.0);
            let (r, _) = recon_loss_grad(&a[0], &b[0]).unwrap();
            prop_assert!(r > 0.0);
        }

        #[test]
        fn bce_is_minimised_at_the_target(s in 0.01f64..0.99, soft in any::<bool>()) {
            let t = if soft { 0.9 } else { 0.1 };
            prop_assert!(disc_loss(&[s], &[t]).unwrap() >= disc_loss(&[t], &[t]).unwrap() - 1e-12);
        }
    }
}
