use inpaint_core::imaging::{gen_mask, MaskSpec};
use inpaint_core::losses::{joint_loss_grad, joint_terms, FeatureExtractor};
use inpaint_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-0.9..0.9)).collect()).unwrap()
}

#[test]
fn joint_loss_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let fx = FeatureExtractor::<f64>::toy(5);
    let shape = [1, 3, 16, 16];
    let (u, crg, org) = (random(shape, &mut rng), random(shape, &mut rng), random(shape, &mut rng));
    let mask = gen_mask(16, &MaskSpec::brush(0.2, 0.4), 3).unwrap().to_tensor::<f64>();
    let (_, grad) = joint_loss_grad(&u, &crg, &org, &mask, &fx, None).unwrap();
    let h = 1e-3;
    let mut ok = 0;
    for i in 0..u.len() {
        let mut plus = u.clone();
        plus.data_mut()[i] += h;
        let mut minus = u.clone();
        minus.data_mut()[i] -= h;
        let lp = joint_terms(&plus, &crg, &org, &mask, &fx, None).unwrap().total;
        let lm = joint_terms(&minus, &crg, &org, &mask, &fx, None).unwrap().total;
        let fd = (lp - lm) / (2.0 * h);
        let an = grad.data()[i];
        if (fd - an).abs() <= 1e-3 * fd.abs().max(an.abs()).max(1e-8) {
            ok += 1;
        }
    }
    let frac = ok as f64 / u.len() as f64;
    println!("gradient agreement {frac:.4}");
    assert!(frac >= 0.95, "only {:.3} of coordinates agree", frac);
}
