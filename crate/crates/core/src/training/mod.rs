//! The three training pipelines (CRG generator/encoder, artifact
//! discriminator, refiner), their configuration, per-epoch reports and
//! best-checkpoint bookkeeping.

mod augment;
mod crg;
mod data;
mod disc;
mod refiner;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::ExtractorSpec;
use crate::models::{save_bundle, ArchConfig, ModelBundle};
use crate::nn::optim::OptimizerConfig;

pub use augment::Transform;
pub use crg::{train_crg, MIN_CRG_IMAGES};
pub use data::{
    list_images, load_image_dir, read_refiner_samples, split_by_hash, stable_hash, write_disc_dataset, write_refiner_samples,
    DiscDataset, RefinerSample,
};
pub use disc::{evaluate_discriminator, train_discriminator, DiscEval};
pub use refiner::{build_refiner_samples, train_refiner};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    Crg,
    Discriminator,
    Refiner,
}

impl Pipeline {
    pub fn name(self) -> &'static str {
        match self {
            Pipeline::Crg => "crg",
            Pipeline::Discriminator => "discriminator",
            Pipeline::Refiner => "refiner",
        }
    }
}

/// Divide the learning rate by `factor` after `patience` epochs without a
/// new validation minimum; `patience = 0` disables it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlateauConfig {
    pub patience: usize,
    pub factor: f64,
}

/// Paired geometric augmentation. `max_shift` is a fraction of the side.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub max_shift: f64,
    pub hflip: bool,
    pub vflip: bool,
}

impl AugmentConfig {
    pub fn is_off(&self) -> bool {
        self.max_shift == 0.0 && !self.hflip && !self.vflip
    }
}

/// How refiner training pairs are produced from a coarse-stage bundle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefinerDataConfig {
    pub cycles: usize,
    /// Hole coverage range of the random masks.
    pub coverage: (f64, f64),
}

impl Default for RefinerDataConfig {
    fn default() -> Self {
        Self {
            cycles: crate::engine::DEFAULT_CYCLES,
            coverage: (0.1, 0.4),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainConfig {
    pub pipeline: Pipeline,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub lr: f64,
    pub lr_plateau: Option<PlateauConfig>,
    pub augment: AugmentConfig,
    /// Fraction of items routed to validation by path hash.
    pub val_fraction: f64,
    pub data_dir: Option<PathBuf>,
    /// Where checkpoints and reports go; nothing is written when absent.
    pub out_dir: Option<PathBuf>,
    pub seed: u64,
    pub arch: ArchConfig,
    /// Style-loss backbone (refiner only).
    pub extractor: ExtractorSpec,
    /// Encoder-phase epochs (CRG only); the GAN phase uses `epochs`.
    pub encoder_epochs: usize,
    pub refiner_data: RefinerDataConfig,
}

impl TrainConfig {
    /// Per-pipeline defaults.
    pub fn defaults(pipeline: Pipeline) -> Self {
        let base = Self {
            pipeline,
            epochs: 0,
            batch_size: 0,
            optimizer: OptimizerConfig::adam(),
            lr: 0.0,
            lr_plateau: None,
            augment: AugmentConfig::default(),
            val_fraction: 0.1,
            data_dir: None,
            out_dir: None,
            seed: 0,
            arch: ArchConfig::default(),
            extractor: ExtractorSpec::default(),
            encoder_epochs: 0,
            refiner_data: RefinerDataConfig::default(),
        };
        match pipeline {
            Pipeline::Refiner => Self {
                epochs: 100,
                batch_size: 16,
                lr: 2e-4,
                augment: AugmentConfig {
                    max_shift: 0.1,
                    hflip: true,
                    vflip: true,
                },
                ..base
            },
            Pipeline::Discriminator => Self {
                epochs: 300,
                batch_size: 128,
                optimizer: OptimizerConfig::rmsprop(),
                lr: 1e-4,
                lr_plateau: Some(PlateauConfig {
                    patience: 15,
                    factor: 2.0,
                }),
                ..base
            },
            Pipeline::Crg => Self {
                epochs: 40,
                encoder_epochs: 40,
                batch_size: 32,
                optimizer: OptimizerConfig::Adam {
                    beta1: 0.5,
                    beta2: 0.999,
                    epsilon: 1e-8,
                },
                lr: 2e-4,
                ..base
            },
        }
    }

    /// Parses a TOML config. Keys left out keep the defaults of the
    /// pipeline named in the file, or of `pipeline` when the file omits it.
    pub fn from_toml_str(text: &str, pipeline: Option<Pipeline>) -> Result<Self> {
        let file: ConfigFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let p = match (file.pipeline, pipeline) {
            (Some(a), Some(b)) if a != b => {
                return Err(Error::Config(format!(
                    "config is for the {} pipeline, not {}",
                    a.name(),
                    b.name()
                )))
            }
            (Some(a), _) | (None, Some(a)) => a,
            (None, None) => return Err(Error::Config("config does not name a pipeline".into())),
        };
        let d = Self::defaults(p);
        let cfg = Self {
            pipeline: p,
            epochs: file.epochs.unwrap_or(d.epochs),
            batch_size: file.batch_size.unwrap_or(d.batch_size),
            optimizer: file.optimizer.unwrap_or(d.optimizer),
            lr: file.lr.unwrap_or(d.lr),
            lr_plateau: match file.lr_plateau {
                Some(pl) if pl.patience == 0 => None,
                Some(pl) => Some(pl),
                None => d.lr_plateau,
            },
            augment: file.augment.unwrap_or(d.augment),
            val_fraction: file.val_fraction.unwrap_or(d.val_fraction),
            data_dir: file.data_dir.or(d.data_dir),
            out_dir: file.out_dir.or(d.out_dir),
            seed: file.seed.unwrap_or(d.seed),
            arch: file.arch.unwrap_or(d.arch),
            extractor: file.extractor.unwrap_or(d.extractor),
            encoder_epochs: file.encoder_epochs.unwrap_or(file.epochs.unwrap_or(d.encoder_epochs)),
            refiner_data: file.refiner_data.unwrap_or(d.refiner_data),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, pipeline: Option<Pipeline>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, pipeline).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// TOML rendering of the effective configuration.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::Config(format!("{field}: {why}")));
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be positive");
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad("val_fraction", "must lie strictly between 0 and 1");
        }
        if let Some(pl) = &self.lr_plateau {
            if pl.factor <= 1.0 {
                return bad("lr_plateau.factor", "must exceed 1");
            }
        }
        if !(0.0..=0.5).contains(&self.augment.max_shift) {
            return bad("augment.max_shift", "must lie in [0, 0.5]");
        }
        let (lo, hi) = self.refiner_data.coverage;
        if !(lo > 0.0 && lo <= hi && hi <= 0.9) {
            return bad("refiner_data.coverage", "must satisfy 0 < lo <= hi <= 0.9");
        }
        if self.refiner_data.cycles == 0 {
            return bad("refiner_data.cycles", "must be at least 1");
        }
        self.arch.validate().map_err(|e| Error::Config(format!("arch: {e}")))
    }
}

/// On-disk form: everything optional, unknown keys rejected.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    pipeline: Option<Pipeline>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    optimizer: Option<OptimizerConfig>,
    lr: Option<f64>,
    lr_plateau: Option<PlateauConfig>,
    augment: Option<AugmentConfig>,
    val_fraction: Option<f64>,
    data_dir: Option<PathBuf>,
    out_dir: Option<PathBuf>,
    seed: Option<u64>,
    arch: Option<ArchConfig>,
    extractor: Option<ExtractorSpec>,
    encoder_epochs: Option<usize>,
    refiner_data: Option<RefinerDataConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based within its phase.
    pub epoch: usize,
    pub phase: String,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub lr: f64,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub pipeline: Pipeline,
    pub epochs: Vec<EpochRecord>,
    /// Index into `epochs` of the record with the lowest validation loss.
    pub best: Option<usize>,
    pub checkpoints: Vec<PathBuf>,
    pub wall_clock_s: f64,
}

impl TrainReport {
    fn new(pipeline: Pipeline) -> Self {
        Self {
            pipeline,
            epochs: Vec::new(),
            best: None,
            checkpoints: Vec::new(),
            wall_clock_s: 0.0,
        }
    }

    pub fn best_record(&self) -> Option<&EpochRecord> {
        self.best.map(|i| &self.epochs[i])
    }

    /// Records in one phase, in order.
    pub fn phase(&self, name: &str) -> Vec<&EpochRecord> {
        self.epochs.iter().filter(|r| r.phase == name).collect()
    }

    /// Appends a record; returns true when it is a new validation minimum.
    fn push(&mut self, rec: EpochRecord) -> bool {
        let improved = match (rec.val_loss, self.best_record().and_then(|b| b.val_loss)) {
            (Some(v), Some(best)) => v < best,
            (Some(v), None) => v.is_finite(),
            _ => false,
        };
        log::info!(
            "{} {} epoch {}: train {:.5} val {} lr {:.2e}",
            self.pipeline.name(),
            rec.phase,
            rec.epoch,
            rec.train_loss,
            rec.val_loss.map_or("-".into(), |v| format!("{v:.5}")),
            rec.lr
        );
        self.epochs.push(rec);
        if improved {
            self.best = Some(self.epochs.len() - 1);
        }
        improved
    }

    /// One CSV row per epoch; metric columns are the union over all epochs.
    pub fn to_csv(&self) -> String {
        let keys: std::collections::BTreeSet<&String> = self.epochs.iter().flat_map(|r| r.metrics.keys()).collect();
        let mut out = String::from("phase,epoch,train_loss,val_loss,lr");
        for k in &keys {
            out.push(',');
            out.push_str(k);
        }
        out.push('\n');
        for r in &self.epochs {
            let val = r.val_loss.map_or(String::new(), |v| v.to_string());
            write!(out, "{},{},{},{},{}", r.phase, r.epoch, r.train_loss, val, r.lr).expect("string write");
            for k in &keys {
                out.push(',');
                if let Some(v) = r.metrics.get(*k) {
                    out.push_str(&v.to_string());
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Output directory layout: `checkpoints/`, `reports/`, and `bundle.ckpt`
/// holding the best weights.
struct OutDir {
    root: PathBuf,
}

impl OutDir {
    fn create(cfg: &TrainConfig) -> Result<Option<Self>> {
        let Some(root) = &cfg.out_dir else { return Ok(None) };
        for sub in ["checkpoints", "reports"] {
            let d = root.join(sub);
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        let config = root.join("reports").join("config.toml");
        std::fs::write(&config, cfg.to_toml()).map_err(|e| Error::io(&config, e))?;
        Ok(Some(Self { root: root.clone() }))
    }

    fn save_best(&self, bundle: &ModelBundle, rec: &EpochRecord) -> Result<PathBuf> {
        let path = self.root.join("checkpoints").join("best.ckpt");
        save_bundle(bundle, &path)?;
        let marker = self.root.join("checkpoints").join("BEST");
        let text = format!(
            "best.ckpt\nphase {}\nepoch {}\nval_loss {}\n",
            rec.phase,
            rec.epoch,
            rec.val_loss.unwrap_or(f64::NAN)
        );
        std::fs::write(&marker, text).map_err(|e| Error::io(&marker, e))?;
        Ok(path)
    }

    fn finish(&self, best: &ModelBundle, last: &ModelBundle, report: &mut TrainReport) -> Result<()> {
        let last_path = self.root.join("checkpoints").join("last.ckpt");
        save_bundle(last, &last_path)?;
        let bundle_path = self.root.join("bundle.ckpt");
        save_bundle(best, &bundle_path)?;
        report.checkpoints = vec![self.root.join("checkpoints").join("best.ckpt"), last_path, bundle_path];
        let csv = self.root.join("reports").join("epochs.csv");
        std::fs::write(&csv, report.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let json = self.root.join("reports").join("report.json");
        let body = serde_json::to_vec_pretty(report).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(&json, body).map_err(|e| Error::io(&json, e))
    }
}

/// Starting bundle for a pipeline: the given base with the pipeline's own
/// architecture fields taken from `cfg`, or an empty bundle.
fn base_bundle(cfg: &TrainConfig, base: Option<ModelBundle>) -> Result<ModelBundle> {
    match base {
        None => ModelBundle::empty(cfg.arch.clone()),
        Some(mut b) => {
            match cfg.pipeline {
                Pipeline::Discriminator => {
                    b.arch.disc_blocks = cfg.arch.disc_blocks;
                    b.arch.disc_width = cfg.arch.disc_width;
                    b.arch.disc_dropout = cfg.arch.disc_dropout;
                }
                Pipeline::Refiner => {
                    b.arch.refiner_width = cfg.arch.refiner_width;
                    b.arch.refiner_resolution = cfg.arch.refiner_resolution;
                }
                Pipeline::Crg => b.arch = cfg.arch.clone(),
            }
            b.arch.validate()?;
            Ok(b)
        }
    }
}

fn batches(order: &[usize], size: usize) -> impl Iterator<Item = &[usize]> {
    order.chunks(size)
}
