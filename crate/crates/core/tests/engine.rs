use std::cell::Cell;

use inpaint_core::engine::{
    inpaint, load_request, read_run_manifest, replay, run_cycles, select_best, BundleInfo, CycleModels, CycleTrace,
    InpaintRequest, ResultWriter,
};
use inpaint_core::imaging::{gen_mask, u8_to_unit, FillPolicy, Image, Mask, MaskSpec};
use inpaint_core::models::{ArchConfig, ModelBundle};
use inpaint_core::{Error, Result};
use proptest::prelude::*;

/// Generator that ignores its code and returns a fixed image.
struct Fixed {
    out: Image,
    scores: Vec<f32>,
    calls: Cell<usize>,
    refiner_res: usize,
}

impl Fixed {
    fn new(out: Image, scores: Vec<f32>) -> Self {
        let r = out.height();
        Self {
            out,
            scores,
            calls: Cell::new(0),
            refiner_res: r,
        }
    }
}

impl CycleModels for Fixed {
    fn resolution(&self) -> usize {
        self.out.height()
    }
    fn encode(&self, img: &Image) -> Result<Vec<f32>> {
        Ok(img.data().to_vec())
    }
    fn generate(&self, _z: &[f32]) -> Result<Image> {
        Ok(self.out.clone())
    }
    fn has_discriminator(&self) -> bool {
        true
    }
    fn score(&self, _img: &Image) -> Result<f32> {
        let i = self.calls.get();
        self.calls.set(i + 1);
        Ok(self.scores.get(i).copied().unwrap_or(0.5))
    }
    fn has_refiner(&self) -> bool {
        true
    }
    fn refiner_resolution(&self) -> usize {
        self.refiner_res
    }
    fn refine(&self, img: &Image) -> Result<Image> {
        // inverts colours, so refined holes differ visibly from the input
        Image::new(img.height(), img.width(), img.data().iter().map(|v| -v).collect())
    }
}

/// Generator whose output depends on the code: a rolled, darkened copy.
struct Roll {
    r: usize,
}

impl CycleModels for Roll {
    fn resolution(&self) -> usize {
        self.r
    }
    fn encode(&self, img: &Image) -> Result<Vec<f32>> {
        Ok(img.data().to_vec())
    }
    fn generate(&self, z: &[f32]) -> Result<Image> {
        let n = z.len();
        Image::new(self.r, self.r, (0..n).map(|i| 0.9 * z[(i + 7) % n]).collect())
    }
    fn has_discriminator(&self) -> bool {
        true
    }
    fn score(&self, img: &Image) -> Result<f32> {
        Ok((img.data().iter().sum::<f32>() / img.data().len() as f32 + 1.0) / 2.0)
    }
    fn has_refiner(&self) -> bool {
        true
    }
    fn refiner_resolution(&self) -> usize {
        2 * self.r
    }
    fn refine(&self, img: &Image) -> Result<Image> {
        Ok(Image::from_fn(img.height(), img.width(), |c, y, x| img.get(c, y, x) * 0.5))
    }
}

fn pattern(r: usize, k: usize) -> Image {
    // on the 8-bit grid, so PNG round trips are exact
    Image::from_fn(r, r, |c, y, x| u8_to_unit((((c * 11 + y * 5 + x * 3 + k) % 23) * 11) as u8))
}

fn hole(r: usize) -> Mask {
    Mask::from_fn(r, r, |y, x| !(r / 4..r / 2).contains(&y) || !(r / 4..3 * r / 4).contains(&x))
}

fn assert_known_equal(a: &Image, b: &Image, m: &Mask) {
    let hw = m.height() * m.width();
    for i in 0..a.data().len() {
        if m.known_at(i % hw) {
            assert_eq!(a.data()[i].to_bits(), b.data()[i].to_bits(), "pixel {i}");
        }
    }
}

#[test]
fn identity_generator_is_a_fixed_point_from_cycle_one() {
    let img = pattern(16, 0);
    let stub = Fixed::new(img.clone(), vec![]);
    let mut req = InpaintRequest::new(img.clone(), hole(16), FillPolicy::white());
    req.refine = false;
    let trace = run_cycles(&stub, &req, |_, _| {}).unwrap();
    assert_eq!(trace.len(), 10);
    assert!(trace.cycles.iter().all(|c| c.composite == img));
}

#[test]
fn selection_follows_scores() {
    let fig = vec![0.41, 0.52, 0.48, 0.63, 0.70, 0.66, 0.81, 0.909, 0.87, 0.90];
    let stub = Fixed::new(pattern(16, 1), fig);
    let req = InpaintRequest::new(pattern(16, 2), hole(16), FillPolicy::Mean);
    let res = inpaint(&stub, &req).unwrap();
    assert_eq!(res.selected_cycle, Some(7));
    assert_eq!(res.coarse.as_ref(), Some(&res.trace.cycles[7].composite));
    let refined = res.refined.unwrap();
    assert_known_equal(&refined, res.coarse.as_ref().unwrap(), &req.mask);
    assert_ne!(&refined, res.coarse.as_ref().unwrap());

    let flat = Fixed::new(pattern(16, 1), vec![0.3; 10]);
    assert_eq!(inpaint(&flat, &req).unwrap().selected_cycle, Some(0));
    let no_scores = CycleTrace::default();
    assert!(matches!(select_best(&no_scores), Err(Error::Selection(_))));
}

#[test]
fn multi_result_mode_keeps_every_cycle() {
    let stub = Roll { r: 16 };
    let mut req = InpaintRequest::new(pattern(16, 3), hole(16), FillPolicy::black());
    req.use_discriminator = false;
    req.cycles = 6;
    let res = inpaint(&stub, &req).unwrap();
    assert_eq!(res.selected_cycle, None);
    assert!(res.coarse.is_none() && res.refined.is_none());
    assert_eq!(res.trace.len(), 6);
    assert!(res.trace.cycles.iter().all(|c| c.score.is_none()));
    assert_eq!(res.refined_cycles.len(), 6);
    for (c, r) in res.trace.cycles.iter().zip(&res.refined_cycles) {
        assert_known_equal(r, &c.composite, &req.mask);
    }
    assert!(res.refine_resampled);
}

#[test]
fn empty_hole_returns_the_input_every_cycle() {
    let img = pattern(16, 4);
    let req = InpaintRequest::new(img.clone(), Mask::ones(16, 16), FillPolicy::white());
    let res = inpaint(&Roll { r: 16 }, &req).unwrap();
    assert!(res.trace.cycles.iter().all(|c| c.composite == img));
    assert_eq!(res.refined.as_ref(), Some(&img));
}

#[test]
fn early_stop_is_optional() {
    let falling: Vec<f32> = (0..20).map(|i| 1.0 - i as f32 * 0.01).collect();
    let mut req = InpaintRequest::new(pattern(16, 5), hole(16), FillPolicy::Mean);
    req.cycles = 20;
    req.refine = false;
    let full = inpaint(&Fixed::new(pattern(16, 6), falling.clone()), &req).unwrap();
    assert_eq!(full.trace.len(), 20);
    req.early_stop = Some(Default::default());
    let short = inpaint(&Fixed::new(pattern(16, 6), falling), &req).unwrap();
    assert_eq!(short.trace.len(), 10);
    assert!(short.trace.stopped_early);
    assert_eq!(short.selected_cycle, Some(0));
}

#[test]
fn request_validation() {
    let stub = Roll { r: 16 };
    let mut req = InpaintRequest::new(pattern(32, 0), hole(32), FillPolicy::Mean);
    assert!(matches!(inpaint(&stub, &req), Err(Error::Shape(_))));
    req = req.fit_to(16).unwrap();
    assert_eq!(req.resized_from, Some((32, 32)));
    assert!(inpaint(&stub, &req).is_ok());
    req.cycles = 0;
    assert!(matches!(inpaint(&stub, &req), Err(Error::Config(_))));
}

#[test]
fn bundle_without_optional_stages() {
    let arch = ArchConfig {
        resolution: 32,
        latent_dim: 8,
        base_channels: 4,
        refiner_width: 2,
        disc_width: 4,
        ..Default::default()
    };
    let mut b = ModelBundle::init(arch, 3).unwrap();
    b.discriminator = None;
    let mut req = InpaintRequest::new(pattern(32, 1), hole(32), FillPolicy::Mean);
    assert!(matches!(inpaint(&b, &req), Err(Error::Config(_))));
    req.use_discriminator = false;
    let res = inpaint(&b, &req).unwrap();
    assert_eq!(res.refined_cycles.len(), 10);
    assert!(res.refine_resampled);
    for r in &res.refined_cycles {
        assert_known_equal(r, &req.image, &req.mask);
    }
}

#[test]
fn result_directories_are_reproducible_and_replayable() {
    let arch = ArchConfig {
        resolution: 32,
        latent_dim: 8,
        base_channels: 4,
        refiner_width: 2,
        disc_width: 4,
        ..Default::default()
    };
    let bundle = ModelBundle::init(arch, 5).unwrap();
    let info = BundleInfo::of("toy", &bundle);
    let mask = gen_mask(32, &MaskSpec::brush(0.2, 0.3), 1).unwrap();
    let mut req = InpaintRequest::new(pattern(32, 2), mask, FillPolicy::noise(9));
    req.cycles = 4;
    let tmp = tempfile::tempdir().unwrap();
    let dirs = [tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c")];
    for d in &dirs[..2] {
        let res = inpaint(&bundle, &req).unwrap();
        ResultWriter::write_all(d, &req, &res, &info).unwrap();
    }
    let (again, res) = replay(&dirs[0], &bundle).unwrap();
    assert_eq!(again, req);
    ResultWriter::write_all(&dirs[2], &again, &res, &info).unwrap();
    let manifest = read_run_manifest(&dirs[0]).unwrap();
    assert_eq!(manifest.cycles_run, 4);
    assert!(manifest.files.contains(&"cycle_3.png".to_string()));
    for d in &dirs[1..] {
        let mut names: Vec<_> = std::fs::read_dir(d).unwrap().map(|e| e.unwrap().file_name()).collect();
        names.sort();
        for name in names {
            let a = std::fs::read(dirs[0].join(&name)).unwrap();
            let b = std::fs::read(d.join(&name)).unwrap();
            assert!(a == b, "{name:?} differs");
        }
    }
    assert_eq!(load_request(&dirs[2]).unwrap(), req);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn known_region_survives_the_whole_pipeline(seed in any::<u64>(), k in 0usize..20, fill in 0u8..4) {
        let img = pattern(16, k);
        let mask = gen_mask(16, &MaskSpec::brush(0.1, 0.5), seed).unwrap();
        let fill = match fill {
            0 => FillPolicy::Mean,
            1 => FillPolicy::noise(seed),
            2 => FillPolicy::white(),
            _ => FillPolicy::black(),
        };
        let req = InpaintRequest::new(img.clone(), mask.clone(), fill);
        let res = inpaint(&Roll { r: 16 }, &req).unwrap();
        for c in &res.trace.cycles {
            assert_known_equal(&c.composite, &img, &mask);
        }
        assert_known_equal(res.refined.as_ref().unwrap(), &img, &mask);
        let again = inpaint(&Roll { r: 16 }, &req).unwrap();
        prop_assert_eq!(again.trace, res.trace);
    }
}
