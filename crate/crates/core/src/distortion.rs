//! Artifact synthesis for the scoring discriminator: blur, brightness and
//! contrast perturbations confined to a hole, and the labelled dataset built
//! from them.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::imaging::{gen_mask, Image, Mask, MaskSpec};

/// Target for clean and mildly distorted samples.
pub const LABEL_REAL: f32 = 0.9;
/// Target for heavily distorted samples.
pub const LABEL_FAKE: f32 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    None,
    Mild,
    Heavy,
}

impl Severity {
    /// Inclusive `(blur, brightness, contrast)` ranges.
    pub fn ranges(self) -> [(f64, f64); 3] {
        match self {
            Severity::None => [(0.0, 0.0), (1.0, 1.0), (1.0, 1.0)],
            Severity::Mild => [(0.3, 0.8), (0.85, 0.95), (0.85, 0.95)],
            Severity::Heavy => [(1.0, 2.5), (0.4, 0.8), (0.4, 0.8)],
        }
    }

    pub fn label(self) -> f32 {
        match self {
            Severity::Heavy => LABEL_FAKE,
            _ => LABEL_REAL,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistortionParams {
    pub blur_sigma: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub severity: Severity,
}

impl DistortionParams {
    pub const IDENTITY: Self = Self {
        blur_sigma: 0.0,
        brightness: 1.0,
        contrast: 1.0,
        severity: Severity::None,
    };

    pub fn is_identity(&self) -> bool {
        self.blur_sigma == 0.0 && self.brightness == 1.0 && self.contrast == 1.0
    }

    /// True when every field lies inside its severity's range.
    pub fn within_ranges(&self) -> bool {
        let [b, br, c] = self.severity.ranges();
        let inside = |v: f64, (lo, hi): (f64, f64)| v >= lo && v <= hi;
        inside(self.blur_sigma, b) && inside(self.brightness, br) && inside(self.contrast, c)
    }
}

/// Draws each field uniformly and independently from the severity's range.
pub fn sample_params(severity: Severity, seed: u64) -> DistortionParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [b, br, c] = severity.ranges();
    let mut draw = |(lo, hi): (f64, f64)| if lo == hi { lo } else { rng.random_range(lo..=hi) };
    DistortionParams {
        blur_sigma: draw(b),
        brightness: draw(br),
        contrast: draw(c),
        severity,
    }
}

/// Distorts the whole image, then keeps the result only inside the hole.
pub fn apply_distortion(img: &Image, m: &Mask, p: &DistortionParams) -> Result<Image> {
    let (h, w) = (img.height(), img.width());
    if (m.height(), m.width()) != (h, w) {
        return Err(shape_err!("mask {}x{} vs image {h}x{w}", m.height(), m.width()));
    }
    if p.blur_sigma < 0.0 || p.brightness <= 0.0 || p.contrast <= 0.0 {
        return Err(Error::Config(format!("invalid distortion parameters {p:?}")));
    }
    if p.is_identity() {
        return Ok(img.clone());
    }
    let hw = h * w;
    let mut unit: Vec<f64> = img.data().iter().map(|&v| (v as f64 + 1.0) / 2.0).collect();
    let means: Vec<f64> = unit.chunks(hw).map(|c| c.iter().sum::<f64>() / hw as f64).collect();
    if p.blur_sigma > 0.0 {
        let kernel = gaussian_kernel(p.blur_sigma);
        for plane in unit.chunks_mut(hw) {
            blur_plane(plane, h, w, &kernel);
        }
    }
    for (c, plane) in unit.chunks_mut(hw).enumerate() {
        let mu = means[c];
        for v in plane {
            let b = (p.brightness * *v).clamp(0.0, 1.0);
            *v = (mu + p.contrast * (b - mu)).clamp(0.0, 1.0);
        }
    }
    Image::new(
        h,
        w,
        img.data()
            .iter()
            .enumerate()
            .map(|(i, &orig)| {
                if m.known_at(i % hw) {
                    orig
                } else {
                    ((2.0 * unit[i] - 1.0) as f32).clamp(-1.0, 1.0)
                }
            })
            .collect(),
    )
}

/// Normalised Gaussian taps truncated at 3σ.
fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Separable blur with edge replication.
fn blur_plane(plane: &mut [f64], h: usize, w: usize, kernel: &[f64]) {
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0; plane.len()];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (k, &t) in kernel.iter().enumerate() {
                let xx = (x as isize + k as isize - r).clamp(0, w as isize - 1) as usize;
                s += t * plane[y * w + xx];
            }
            tmp[y * w + x] = s;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (k, &t) in kernel.iter().enumerate() {
                let yy = (y as isize + k as isize - r).clamp(0, h as isize - 1) as usize;
                s += t * tmp[yy * w + x];
            }
            plane[y * w + x] = s;
        }
    }
}

/// One labelled discriminator example.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub image: Image,
    pub label: f32,
}

/// Distortion masks cover roughly a tenth to a third of the image.
pub const DISTORTION_COVERAGE: (f64, f64) = (0.10, 0.35);

/// A manifest line: everything needed to regenerate one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: usize,
    pub source: String,
    pub source_index: usize,
    pub severity: Severity,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<MaskRecord>,
    pub params: DistortionParams,
    pub label: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskRecord {
    pub spec: MaskSpec,
    pub seed: u64,
}

/// Per-class sample counts `(clean, mild, heavy)` for a dataset of `total`.
pub fn class_counts(total: usize) -> (usize, usize, usize) {
    let clean = (total as f64 * 22.0 / 60.0).round() as usize;
    let mild = (total as f64 * 8.0 / 60.0).round() as usize;
    (clean, mild, total - clean - mild)
}

/// Decides every sample's source, mask and parameters without touching pixels.
/// Sample `i` draws from its own stream seeded with `seed + i`.
pub fn plan_disc_dataset(sources: &[String], total: usize, seed: u64) -> Result<Vec<SampleRecord>> {
    if total < 30 {
        return Err(Error::DegenerateInput(format!("dataset total {total} is below 30")));
    }
    if sources.is_empty() {
        return Err(Error::DegenerateInput("no source images".into()));
    }
    let (clean, mild, _) = class_counts(total);
    Ok((0..total)
        .map(|index| {
            let severity = if index < clean {
                Severity::None
            } else if index < clean + mild {
                Severity::Mild
            } else {
                Severity::Heavy
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(index as u64));
            let source_index = rng.random_range(0..sources.len());
            let (mask, params) = if severity == Severity::None {
                (None, DistortionParams::IDENTITY)
            } else {
                let spec = if rng.random_bool(0.5) {
                    MaskSpec::Rectangular {
                        rect: None,
                        coverage: DISTORTION_COVERAGE,
                    }
                } else {
                    MaskSpec::IrregularBrush {
                        coverage: DISTORTION_COVERAGE,
                        radius: None,
                    }
                };
                let mask = MaskRecord { spec, seed: rng.random() };
                (Some(mask), sample_params(severity, rng.random()))
            };
            SampleRecord {
                index,
                source: sources[source_index].clone(),
                source_index,
                severity,
                mask,
                params,
                label: severity.label(),
            }
        })
        .collect())
}

/// Renders a planned record against its source image.
pub fn realize(record: &SampleRecord, source: &Image) -> Result<LabeledSample> {
    let image = match &record.mask {
        None => source.clone(),
        Some(mr) => {
            let m = gen_mask(source.height(), &mr.spec, mr.seed)?;
            apply_distortion(source, &m, &record.params)?
        }
    };
    Ok(LabeledSample {
        image,
        label: record.label,
    })
}

/// Builds the labelled set in memory. Sources are referred to by index.
pub fn build_disc_dataset(images: &[Image], total: usize, seed: u64) -> Result<Vec<LabeledSample>> {
    let names: Vec<String> = (0..images.len()).map(|i| format!("#{i}")).collect();
    plan_disc_dataset(&names, total, seed)?
        .iter()
        .map(|r| realize(r, &images[r.source_index]))
        .collect()
}

pub fn write_manifest(path: &Path, records: &[SampleRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<SampleRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), n + 1)))?,
        );
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit_image(h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f64) -> Image {
        Image::from_fn(h, w, |c, y, x| (2.0 * f(c, y, x) - 1.0) as f32)
    }

    #[test]
    fn severity_ranges_are_exact() {
        assert_eq!(Severity::Heavy.ranges(), [(1.0, 2.5), (0.4, 0.8), (0.4, 0.8)]);
        assert_eq!(Severity::Mild.ranges(), [(0.3, 0.8), (0.85, 0.95), (0.85, 0.95)]);
        for seed in 0..500 {
            assert!(sample_params(Severity::Heavy, seed).within_ranges());
            assert!(sample_params(Severity::Mild, seed).within_ranges());
        }
        assert_eq!(sample_params(Severity::Mild, 3), sample_params(Severity::Mild, 3));
    }

    #[test]
    fn identity_params_are_exact_identity() {
        let img = Image::from_fn(8, 8, |c, y, x| ((c + y * x) % 7) as f32 / 7.0 - 0.5);
        let out = apply_distortion(&img, &Mask::zeros(8, 8), &DistortionParams::IDENTITY).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn brightness_scalar_oracle() {
        let img = unit_image(4, 4, |_, _, _| 0.6);
        let p = DistortionParams {
            brightness: 0.5,
            ..DistortionParams::IDENTITY
        };
        let out = apply_distortion(&img, &Mask::zeros(4, 4), &p).unwrap();
        for &v in out.data() {
            assert!(((v as f64 + 1.0) / 2.0 - 0.3).abs() < 1e-6);
        }
    }

    #[test]
    fn contrast_scalar_oracle() {
        // left column 0.2, right column 0.8 → per-channel mean 0.5
        let img = unit_image(2, 2, |_, _, x| if x == 0 { 0.2 } else { 0.8 });
        let p = DistortionParams {
            contrast: 0.5,
            ..DistortionParams::IDENTITY
        };
        let out = apply_distortion(&img, &Mask::zeros(2, 2), &p).unwrap();
        for c in 0..3 {
            for y in 0..2 {
                let a = (out.get(c, y, 0) as f64 + 1.0) / 2.0;
                let b = (out.get(c, y, 1) as f64 + 1.0) / 2.0;
                assert!((a - 0.35).abs() < 1e-6 && (b - 0.65).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn blur_of_constant_is_constant_and_kernel_is_normalised() {
        let k = gaussian_kernel(1.0);
        assert_eq!(k.len(), 7);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let img = unit_image(9, 9, |_, _, _| 0.25);
        let p = DistortionParams {
            blur_sigma: 2.0,
            ..DistortionParams::IDENTITY
        };
        let out = apply_distortion(&img, &Mask::zeros(9, 9), &p).unwrap();
        for (a, b) in out.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn class_counts_follow_the_ratio() {
        assert_eq!(class_counts(60_000), (22_000, 8_000, 30_000));
        assert_eq!(class_counts(600), (220, 80, 300));
        assert!(matches!(
            build_disc_dataset(&[Image::filled(8, 8, [0.0; 3])], 29, 0),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn manifest_round_trip_regenerates_samples() {
        let srcs: Vec<String> = vec!["a.png".into(), "b.png".into()];
        let plan = plan_disc_dataset(&srcs, 40, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        write_manifest(&path, &plan).unwrap();
        let back = read_manifest(&path).unwrap();
        assert_eq!(back, plan);
        let imgs = [
            Image::from_fn(32, 32, |c, y, x| ((c * 5 + y + 2 * x) % 17) as f32 / 17.0),
            Image::filled(32, 32, [0.1, 0.2, 0.3]),
        ];
        for (a, b) in plan.iter().zip(&back) {
            assert_eq!(realize(a, &imgs[a.source_index]).unwrap(), realize(b, &imgs[b.source_index]).unwrap());
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn known_pixels_untouched(seed in any::<u64>(), heavy in any::<bool>()) {
            let img = Image::from_fn(32, 32, |c, y, x| ((c * 13 + y * 7 + x * 3) % 29) as f32 / 14.5 - 1.0);
            let m = gen_mask(32, &MaskSpec::brush(0.1, 0.35), seed).unwrap();
            let sev = if heavy { Severity::Heavy } else { Severity::Mild };
            let out = apply_distortion(&img, &m, &sample_params(sev, seed)).unwrap();
            for i in 0..out.data().len() {
                prop_assert!((-1.0..=1.0).contains(&out.data()[i]));
                if m.known_at(i % 1024) {
                    prop_assert_eq!(out.data()[i].to_bits(), img.data()[i].to_bits());
                }
            }
        }

        #[test]
        fn dimmer_means_darker_hole(a in 0.4f64..1.0, b in 0.4f64..1.0, seed in any::<u64>()) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let img = Image::from_fn(16, 16, |c, y, x| ((c + y * 3 + x * 5) % 11) as f32 / 5.5 - 1.0);
            let m = gen_mask(16, &MaskSpec::Rectangular { rect: None, coverage: (0.1, 0.4) }, seed).unwrap();
            let mean_hole = |br: f64| {
                let p = DistortionParams { blur_sigma: 1.2, brightness: br, contrast: 0.7, severity: Severity::Heavy };
                let out = apply_distortion(&img, &m, &p).unwrap();
                let vals: Vec<f64> = (0..out.data().len())
                    .filter(|i| !m.known_at(i % 256))
                    .map(|i| out.data()[i] as f64)
                    .collect();
                vals.iter().sum::<f64>() / vals.len() as f64
            };
            prop_assert!(mean_hole(lo) <= mean_hole(hi) + 1e-9);
        }

        #[test]
        fn label_proportions_within_rounding(total in 30usize..5000) {
            let (c, m, h) = class_counts(total);
            prop_assert_eq!(c + m + h, total);
            prop_assert!((c as f64 - total as f64 * 22.0 / 60.0).abs() <= 1.0);
            prop_assert!((m as f64 - total as f64 * 8.0 / 60.0).abs() <= 1.0);
            prop_assert!((h as f64 - total as f64 * 30.0 / 60.0).abs() <= 1.0);
        }
    }
}
