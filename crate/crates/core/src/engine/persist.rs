//! Result directories: everything a run produced, plus a manifest that is
//! enough to replay it. Files are written cycle by cycle so a partially
//! finished run can be served; the manifest is written last and marks a
//! complete run.
//!
//! Wall-clock timings are never written, so identical runs produce
//! byte-identical directories.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{inpaint, CycleModels, CycleRecord, EarlyStop, InpaintRequest, InpaintResult};
use crate::error::{Error, Result};
use crate::imaging::{
    encode_mask_png, encode_png, encode_sketch_png, load_image, load_mask, load_sketch, FillPolicy, FillRecord,
};
use crate::models::ModelBundle;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SCORES_FILE: &str = "scores.txt";
const SKETCH_FILE: &str = "sketch.png";
const RUN_FORMAT: u32 = 1;

/// Which bundle produced a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleInfo {
    pub name: String,
    pub version: String,
    pub resolution: usize,
    pub networks: Vec<String>,
}

impl BundleInfo {
    pub fn of(name: &str, b: &ModelBundle) -> Self {
        Self {
            name: name.to_string(),
            version: b.version.clone(),
            resolution: b.arch.resolution,
            networks: b.networks().into_iter().map(String::from).collect(),
        }
    }
}

/// Request parameters; pixels live next to the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub resolution: usize,
    pub fill: FillRecord,
    pub cycles: usize,
    pub use_discriminator: bool,
    pub refine: bool,
    pub seed: u64,
    pub early_stop: Option<EarlyStop>,
    pub resized_from: Option<(usize, usize)>,
}

impl RequestRecord {
    pub fn of(req: &InpaintRequest) -> Self {
        Self {
            resolution: req.image.height(),
            fill: req.fill.record(),
            cycles: req.cycles,
            use_discriminator: req.use_discriminator,
            refine: req.refine,
            seed: req.seed,
            early_stop: req.early_stop,
            resized_from: req.resized_from,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub request: RequestRecord,
    pub bundle: BundleInfo,
    pub cycles_run: usize,
    pub selected_cycle: Option<usize>,
    pub scores: Option<Vec<f32>>,
    pub stopped_early: bool,
    pub refine_resampled: bool,
    pub files: Vec<String>,
}

pub fn cycle_file(i: usize) -> String {
    format!("cycle_{i}.png")
}

pub fn refined_cycle_file(i: usize) -> String {
    format!("refined_{i}.png")
}

/// Writes `bytes` through a temporary name so readers never see a partial file.
fn put(dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    let path = dir.join(name);
    let tmp = dir.join(format!(".{name}.tmp"));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
}

/// Incremental writer for one result directory.
pub struct ResultWriter {
    dir: PathBuf,
    files: Vec<String>,
}

impl ResultWriter {
    /// Creates the directory and writes the inputs.
    pub fn begin(dir: &Path, req: &InpaintRequest) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut w = Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        };
        w.put("input.png", &encode_png(&req.image)?)?;
        w.put("mask.png", &encode_mask_png(&req.mask)?)?;
        if let FillPolicy::Sketch(s) = &req.fill {
            w.put(SKETCH_FILE, &encode_sketch_png(s)?)?;
        }
        Ok(w)
    }

    fn put(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        put(&self.dir, name, bytes)?;
        self.files.push(name.to_string());
        Ok(())
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write_cycle(&mut self, i: usize, rec: &CycleRecord) -> Result<()> {
        self.put(&cycle_file(i), &encode_png(&rec.composite)?)
    }

    /// Writes scores, coarse/refined images and finally the manifest.
    pub fn finish(mut self, req: &InpaintRequest, result: &InpaintResult, bundle: &BundleInfo) -> Result<RunManifest> {
        let scores = result.trace.scores();
        if let Some(s) = &scores {
            let mut text = String::new();
            for (i, v) in s.iter().enumerate() {
                writeln!(text, "{i}\t{v}").expect("writing to a string");
            }
            self.put(SCORES_FILE, text.as_bytes())?;
        }
        if let Some(c) = &result.coarse {
            self.put("coarse.png", &encode_png(c)?)?;
        }
        if let Some(r) = &result.refined {
            self.put("refined.png", &encode_png(r)?)?;
        }
        for (i, r) in result.refined_cycles.iter().enumerate() {
            self.put(&refined_cycle_file(i), &encode_png(r)?)?;
        }
        let manifest = RunManifest {
            format_version: RUN_FORMAT,
            request: RequestRecord::of(req),
            bundle: bundle.clone(),
            cycles_run: result.trace.len(),
            selected_cycle: result.selected_cycle,
            scores,
            stopped_early: result.trace.stopped_early,
            refine_resampled: result.refine_resampled,
            files: self.files.clone(),
        };
        let json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
        put(&self.dir, MANIFEST_FILE, &json)?;
        Ok(manifest)
    }

    /// Writes a finished run in one go.
    pub fn write_all(
        dir: &Path,
        req: &InpaintRequest,
        result: &InpaintResult,
        bundle: &BundleInfo,
    ) -> Result<RunManifest> {
        let mut w = Self::begin(dir, req)?;
        for (i, rec) in result.trace.cycles.iter().enumerate() {
            w.write_cycle(i, rec)?;
        }
        w.finish(req, result, bundle)
    }
}

pub fn read_run_manifest(dir: &Path) -> Result<RunManifest> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Rebuilds the request a result directory was produced from.
pub fn load_request(dir: &Path) -> Result<InpaintRequest> {
    let m = read_run_manifest(dir)?;
    let r = m.request.resolution;
    let image = load_image(&dir.join("input.png"), r)?;
    let mask = load_mask(&dir.join("mask.png"), (r, r))?;
    let fill = match m.request.fill {
        FillRecord::Mean => FillPolicy::Mean,
        FillRecord::Noise { sigma, seed } => FillPolicy::ZeroMeanNoise { sigma, seed },
        FillRecord::Constant { color } => FillPolicy::Constant { color },
        FillRecord::Sketch { file } => FillPolicy::Sketch(load_sketch(&dir.join(file), (r, r))?),
    };
    Ok(InpaintRequest {
        image,
        mask,
        fill,
        cycles: m.request.cycles,
        use_discriminator: m.request.use_discriminator,
        refine: m.request.refine,
        seed: m.request.seed,
        early_stop: m.request.early_stop,
        resized_from: m.request.resized_from,
    })
}

/// Re-runs a persisted request.
pub fn replay(dir: &Path, models: &dyn CycleModels) -> Result<(InpaintRequest, InpaintResult)> {
    let req = load_request(dir)?;
    let result = inpaint(models, &req)?;
    Ok((req, result))
}
