//! The cyclic inpainting loop: fill the hole, then repeatedly encode,
//! generate and paste the generated hole back into the original, scoring each
//! composite; pick the best-scoring one and refine it.

mod persist;

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::imaging::{apply_fill, compose_cycle_input, compose_refined, FillPolicy, Image, Mask};
use crate::models::ModelBundle;

pub use persist::{
    load_request, read_run_manifest, replay, BundleInfo, RequestRecord, ResultWriter, RunManifest, MANIFEST_FILE,
    SCORES_FILE,
};

pub const DEFAULT_CYCLES: usize = 10;

/// The networks one cycle needs. Implemented by [`ModelBundle`]; tests plug
/// in stubs.
pub trait CycleModels {
    fn resolution(&self) -> usize;
    fn encode(&self, img: &Image) -> Result<Vec<f32>>;
    fn generate(&self, z: &[f32]) -> Result<Image>;
    fn has_discriminator(&self) -> bool;
    fn score(&self, img: &Image) -> Result<f32>;
    fn has_refiner(&self) -> bool;
    /// Side length the refiner is run at.
    fn refiner_resolution(&self) -> usize;
    fn refine(&self, img: &Image) -> Result<Image>;
}

impl CycleModels for ModelBundle {
    fn resolution(&self) -> usize {
        self.arch.resolution
    }

    fn encode(&self, img: &Image) -> Result<Vec<f32>> {
        ModelBundle::encode(self, img)
    }

    fn generate(&self, z: &[f32]) -> Result<Image> {
        ModelBundle::generate(self, z)
    }

    fn has_discriminator(&self) -> bool {
        self.discriminator.is_some()
    }

    fn score(&self, img: &Image) -> Result<f32> {
        self.discriminate(img)
    }

    fn has_refiner(&self) -> bool {
        self.refiner.is_some()
    }

    fn refiner_resolution(&self) -> usize {
        self.arch.refiner_resolution
    }

    fn refine(&self, img: &Image) -> Result<Image> {
        ModelBundle::refine(self, img)
    }
}

/// Stop once scores have fallen `decreases` times in a row, but never before
/// `min_cycles` cycles.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EarlyStop {
    pub min_cycles: usize,
    pub decreases: usize,
}

impl Default for EarlyStop {
    fn default() -> Self {
        Self {
            min_cycles: 10,
            decreases: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InpaintRequest {
    pub image: Image,
    pub mask: Mask,
    pub fill: FillPolicy,
    /// Maximum number of cycles (exact unless early stopping is on).
    pub cycles: usize,
    pub use_discriminator: bool,
    pub refine: bool,
    pub seed: u64,
    pub early_stop: Option<EarlyStop>,
    /// Original `(height, width)` when [`InpaintRequest::fit_to`] resized the inputs.
    pub resized_from: Option<(usize, usize)>,
}

impl InpaintRequest {
    pub fn new(image: Image, mask: Mask, fill: FillPolicy) -> Self {
        Self {
            image,
            mask,
            fill,
            cycles: DEFAULT_CYCLES,
            use_discriminator: true,
            refine: true,
            seed: 0,
            early_stop: None,
            resized_from: None,
        }
    }

    /// Resizes image (bilinear), mask (nearest) and sketch to `size × size`
    /// when they differ, recording the original size.
    pub fn fit_to(mut self, size: usize) -> Result<Self> {
        let (h, w) = (self.image.height(), self.image.width());
        if (self.mask.height(), self.mask.width()) != (h, w) {
            return Err(shape_err!(
                "mask is {}x{} but image is {h}x{w}",
                self.mask.height(),
                self.mask.width()
            ));
        }
        if (h, w) == (size, size) {
            return Ok(self);
        }
        self.image = self.image.resize_bilinear(size, size);
        self.mask = self.mask.resize_nearest(size, size);
        if let FillPolicy::Sketch(s) = &self.fill {
            self.fill = FillPolicy::Sketch(s.resize(size, size)?);
        }
        self.resized_from = Some((h, w));
        Ok(self)
    }

    fn validate(&self, models: &dyn CycleModels) -> Result<()> {
        let r = models.resolution();
        if self.cycles == 0 {
            return Err(Error::Config("cycles must be at least 1".into()));
        }
        if (self.image.height(), self.image.width()) != (r, r) || (self.mask.height(), self.mask.width()) != (r, r) {
            return Err(shape_err!(
                "request is {}x{} (mask {}x{}), bundle works at {r}x{r}",
                self.image.height(),
                self.image.width(),
                self.mask.height(),
                self.mask.width()
            ));
        }
        if self.use_discriminator && !models.has_discriminator() {
            return Err(Error::Config(
                "bundle has no artifact discriminator; disable scoring to run without one".into(),
            ));
        }
        if self.refine && !models.has_refiner() {
            return Err(Error::Config("bundle has no refiner; disable refinement to run without one".into()));
        }
        Ok(())
    }
}

/// One pass of the loop.
#[derive(Clone, Debug, PartialEq)]
pub struct CycleRecord {
    pub generator_output: Image,
    /// Original where known, generator output in the hole; also the next input.
    pub composite: Image,
    pub score: Option<f32>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct CycleTrace {
    pub cycles: Vec<CycleRecord>,
    pub stopped_early: bool,
}

impl CycleTrace {
    pub fn scores(&self) -> Option<Vec<f32>> {
        self.cycles.iter().map(|c| c.score).collect()
    }

    pub fn len(&self) -> usize {
        self.cycles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cycles.is_empty()
    }
}

/// Runs the loop, calling `on_cycle(i, record)` after each cycle.
pub fn run_cycles(
    models: &dyn CycleModels,
    req: &InpaintRequest,
    mut on_cycle: impl FnMut(usize, &CycleRecord),
) -> Result<CycleTrace> {
    req.validate(models)?;
    let mut current = apply_fill(&req.image, &req.mask, &req.fill)?;
    let mut trace = CycleTrace::default();
    for i in 0..req.cycles {
        let z = models.encode(&current)?;
        let generated = models.generate(&z)?;
        let composite = compose_cycle_input(&req.image, &req.mask, &generated)?;
        let score = if req.use_discriminator {
            Some(models.score(&composite)?)
        } else {
            None
        };
        let record = CycleRecord {
            generator_output: generated,
            composite,
            score,
        };
        on_cycle(i, &record);
        current = record.composite.clone();
        trace.cycles.push(record);
        if let (Some(stop), Some(scores)) = (req.early_stop, trace.scores()) {
            if should_stop(&scores, stop) && i + 1 < req.cycles {
                trace.stopped_early = true;
                break;
            }
        }
    }
    Ok(trace)
}

fn should_stop(scores: &[f32], stop: EarlyStop) -> bool {
    if scores.len() < stop.min_cycles.max(stop.decreases + 1) || stop.decreases == 0 {
        return false;
    }
    scores[scores.len() - stop.decreases - 1..].windows(2).all(|w| w[1] < w[0])
}

/// Index of the largest score, earliest on ties; NaN ranks below everything.
pub fn argmax_earliest(scores: &[f32]) -> Option<usize> {
    let key = |s: f32| if s.is_nan() { f32::NEG_INFINITY } else { s };
    let mut best: Option<(usize, f32)> = None;
    for (i, &s) in scores.iter().enumerate() {
        let s = key(s);
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| i)
}

/// The cycle whose composite scored highest.
pub fn select_best(trace: &CycleTrace) -> Result<usize> {
    let scores = trace
        .scores()
        .ok_or_else(|| Error::Selection("trace has no scores; enable the discriminator".into()))?;
    argmax_earliest(&scores).ok_or_else(|| Error::Selection("trace is empty".into()))
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Timings {
    pub cycles_ms: f64,
    pub refine_ms: f64,
    pub total_ms: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InpaintResult {
    /// `None` in multi-result mode (no discriminator).
    pub selected_cycle: Option<usize>,
    /// The selected composite.
    pub coarse: Option<Image>,
    /// Refined selected composite.
    pub refined: Option<Image>,
    /// Multi-result mode with refinement: every composite, refined.
    pub refined_cycles: Vec<Image>,
    pub trace: CycleTrace,
    /// True when the refiner ran at a different resolution than the bundle.
    pub refine_resampled: bool,
    pub timings: Timings,
}

pub fn inpaint(models: &dyn CycleModels, req: &InpaintRequest) -> Result<InpaintResult> {
    inpaint_with(models, req, |_, _| {})
}

/// [`inpaint`] with a per-cycle progress callback.
pub fn inpaint_with(
    models: &dyn CycleModels,
    req: &InpaintRequest,
    on_cycle: impl FnMut(usize, &CycleRecord),
) -> Result<InpaintResult> {
    let start = Instant::now();
    let trace = run_cycles(models, req, on_cycle)?;
    let cycles_ms = ms(start);
    let refine_start = Instant::now();
    let mut result = InpaintResult {
        selected_cycle: None,
        coarse: None,
        refined: None,
        refined_cycles: Vec::new(),
        trace,
        refine_resampled: false,
        timings: Timings::default(),
    };
    if req.use_discriminator {
        let best = select_best(&result.trace)?;
        let coarse = result.trace.cycles[best].composite.clone();
        if req.refine {
            let (refined, resampled) = refine_composite(models, &coarse, &req.mask)?;
            result.refined = Some(refined);
            result.refine_resampled = resampled;
        }
        result.selected_cycle = Some(best);
        result.coarse = Some(coarse);
    } else if req.refine {
        for c in &result.trace.cycles {
            let (refined, resampled) = refine_composite(models, &c.composite, &req.mask)?;
            result.refined_cycles.push(refined);
            result.refine_resampled = resampled;
        }
    }
    result.timings = Timings {
        cycles_ms,
        refine_ms: ms(refine_start),
        total_ms: ms(start),
    };
    Ok(result)
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Runs the refiner on `coarse` and keeps its output only in the hole.
///
/// When the refiner works at another resolution the coarse image is
/// bilinearly resampled there and the refined result brought back; the final
/// composite still takes every known pixel from `coarse`.
pub fn refine_composite(models: &dyn CycleModels, coarse: &Image, m: &Mask) -> Result<(Image, bool)> {
    let r = coarse.height();
    let rr = models.refiner_resolution();
    if rr == r {
        return Ok((compose_refined(coarse, m, &models.refine(coarse)?)?, false));
    }
    let up = coarse.resize_bilinear(rr, rr);
    let out = models.refine(&up)?;
    let back = if rr > r && rr % r == 0 {
        out.downsample_box(rr / r)?
    } else {
        out.resize_bilinear(r, r)
    };
    Ok((compose_refined(coarse, m, &back)?, true))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_rules() {
        let fig = [0.41, 0.52, 0.48, 0.63, 0.70, 0.66, 0.81, 0.909, 0.87, 0.90];
        assert_eq!(argmax_earliest(&fig), Some(7));
        assert_eq!(argmax_earliest(&[0.1, 0.2, 0.3]), Some(2));
        assert_eq!(argmax_earliest(&[0.5; 4]), Some(0));
        assert_eq!(argmax_earliest(&[f32::NAN, 0.1, f32::NAN]), Some(1));
        assert_eq!(argmax_earliest(&[]), None);
    }

    #[test]
    fn early_stop_needs_consecutive_drops_after_the_minimum() {
        let stop = EarlyStop::default();
        let falling: Vec<f32> = (0..10).map(|i| 1.0 - i as f32 * 0.01).collect();
        assert!(should_stop(&falling, stop));
        assert!(!should_stop(&falling[..9], stop));
        let mut bumpy = falling.clone();
        bumpy[8] = 0.99;
        assert!(!should_stop(&bumpy, stop));
    }
}
