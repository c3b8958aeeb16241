//! Network definitions: generator, encoder, GAN critic, artifact
//! discriminator and the Unet refiner, plus the [`ModelBundle`] that carries
//! them between training, inference and disk.

mod checkpoint;
mod refiner;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::imaging::Image;
use crate::nn::{Activation, BatchNorm2d, Layer, Linear, Sequential};
use crate::tensor::Tensor;

pub use checkpoint::{load_bundle, load_bundle_for, read_archive, save_bundle, write_archive, Archive, FORMAT_VERSION};
pub use refiner::{Refiner, RefinerTape, RefinerTrace};

const SLOPE: f32 = 0.2;

/// Architecture hyperparameters shared by every network in a bundle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    /// Square side of generator, encoder and discriminator images.
    pub resolution: usize,
    pub latent_dim: usize,
    /// Channel width at full resolution for the generator/encoder/critic.
    pub base_channels: usize,
    pub refiner_resolution: usize,
    /// First refiner encoder width; 64 reproduces the reference table.
    pub refiner_width: usize,
    pub disc_blocks: usize,
    pub disc_width: usize,
    /// Spatial dropout rate after each discriminator block.
    pub disc_dropout: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            latent_dim: 128,
            base_channels: 32,
            refiner_resolution: 128,
            refiner_width: 64,
            disc_blocks: 3,
            disc_width: 64,
            disc_dropout: 0.5,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolution < 32 || !self.resolution.is_power_of_two() {
            return Err(Error::Config(format!(
                "resolution must be a power of two >= 32, got {}",
                self.resolution
            )));
        }
        if self.latent_dim == 0 || self.base_channels == 0 || self.disc_width == 0 || self.disc_blocks == 0 {
            return Err(Error::Config("latent_dim, base_channels, disc_width and disc_blocks must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.disc_dropout) {
            return Err(Error::Config(format!("disc_dropout must be in [0, 1), got {}", self.disc_dropout)));
        }
        if self.refiner_resolution == 0 || self.refiner_resolution % 128 != 0 || self.refiner_width == 0 {
            return Err(Error::Config(format!(
                "refiner resolution must be a positive multiple of 128, got {}",
                self.refiner_resolution
            )));
        }
        Ok(())
    }

    /// Generator/encoder width at spatial size `s`.
    fn width_at(&self, s: usize) -> usize {
        (self.base_channels * self.resolution / s).min(8 * self.base_channels)
    }

    /// Spatial sizes from 4 up to the full resolution.
    fn ladder(&self) -> Vec<usize> {
        std::iter::successors(Some(4), |s| Some(s * 2))
            .take_while(|&s| s <= self.resolution)
            .collect()
    }
}

fn lrelu<T: crate::Float>() -> Layer<T> {
    Layer::Act(Activation::LeakyRelu(SLOPE))
}

/// latent → dense 4×4 → (upsample, conv, BN, lrelu)* → conv → tanh.
pub fn build_generator(arch: &ArchConfig, rng: &mut ChaCha8Rng) -> Sequential {
    let ladder = arch.ladder();
    let c0 = arch.width_at(4);
    let mut layers = vec![
        Layer::Dense(Linear::new(arch.latent_dim, c0 * 16, 1.0, rng)),
        Layer::Unflatten([c0, 4, 4]),
        Layer::Norm(BatchNorm2d::new(c0)),
        lrelu(),
    ];
    for pair in ladder.windows(2) {
        let (cin, cout) = (arch.width_at(pair[0]), arch.width_at(pair[1]));
        layers.push(Layer::Upsample2);
        layers.push(Layer::conv(cin, cout, 3, 1, SLOPE as f64, rng));
        layers.push(Layer::Norm(BatchNorm2d::new(cout)));
        layers.push(lrelu());
    }
    layers.push(Layer::conv(arch.width_at(arch.resolution), 3, 3, 1, 1.0, rng));
    layers.push(Layer::Act(Activation::Tanh));
    Sequential::new(layers)
}

/// Mirror of the generator: stride-2 convs down to 4×4, then a dense head.
fn conv_tower(arch: &ArchConfig, norm: bool, out: usize, rng: &mut ChaCha8Rng) -> Sequential {
    let ladder = arch.ladder();
    let mut layers = vec![
        Layer::conv(3, arch.width_at(arch.resolution), 3, 1, SLOPE as f64, rng),
        lrelu(),
    ];
    for pair in ladder.windows(2).rev() {
        let (cin, cout) = (arch.width_at(pair[1]), arch.width_at(pair[0]));
        layers.push(Layer::conv(cin, cout, 3, 2, SLOPE as f64, rng));
        if norm {
            layers.push(Layer::Norm(BatchNorm2d::new(cout)));
        }
        layers.push(lrelu());
    }
    layers.push(Layer::Flatten);
    layers.push(Layer::Dense(Linear::new(arch.width_at(4) * 16, out, 1.0, rng)));
    Sequential::new(layers)
}

/// Image → latent code of length `latent_dim`.
pub fn build_encoder(arch: &ArchConfig, rng: &mut ChaCha8Rng) -> Sequential {
    conv_tower(arch, true, arch.latent_dim, rng)
}

/// The internal GAN critic used while training the generator; emits a logit.
pub fn build_critic(arch: &ArchConfig, rng: &mut ChaCha8Rng) -> Sequential {
    conv_tower(arch, false, 1, rng)
}

/// Artifact discriminator: `disc_blocks` × (conv3×3/2, BN, lrelu, spatial
/// dropout), global average pooling, a dense unit and a sigmoid.
pub fn build_discriminator(arch: &ArchConfig, rng: &mut ChaCha8Rng) -> Sequential {
    let mut layers = Vec::new();
    let mut cin = 3;
    for b in 0..arch.disc_blocks {
        let cout = arch.disc_width << b;
        layers.push(Layer::conv(cin, cout, 3, 2, SLOPE as f64, rng));
        layers.push(Layer::Norm(BatchNorm2d::new(cout)));
        layers.push(lrelu());
        layers.push(Layer::SpatialDropout(arch.disc_dropout));
        cin = cout;
    }
    layers.push(Layer::GlobalAvgPool);
    layers.push(Layer::Flatten);
    layers.push(Layer::Dense(Linear::new(cin, 1, 1.0, rng)));
    layers.push(Layer::Act(Activation::Sigmoid));
    Sequential::new(layers)
}

/// Trainable scalar count of a stack.
pub fn count_params(net: &Sequential) -> usize {
    net.count_params()
}

/// Up to four networks plus the metadata needed to rebuild them. Each
/// training pipeline fills in its own network; inference needs the
/// generator and encoder, the other two are optional stages.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub arch: ArchConfig,
    pub generator: Option<Sequential>,
    pub encoder: Option<Sequential>,
    pub discriminator: Option<Sequential>,
    pub refiner: Option<Refiner>,
    pub version: String,
    pub meta: BTreeMap<String, serde_json::Value>,
}

impl ModelBundle {
    /// Freshly initialised networks; all four are present.
    pub fn init(arch: ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let generator = Some(build_generator(&arch, &mut rng));
        let encoder = Some(build_encoder(&arch, &mut rng));
        let discriminator = Some(build_discriminator(&arch, &mut rng));
        let refiner = Some(Refiner::new(arch.refiner_width, &mut rng));
        Ok(Self {
            arch,
            generator,
            encoder,
            discriminator,
            refiner,
            version: env!("CARGO_PKG_VERSION").to_string(),
            meta: BTreeMap::new(),
        })
    }

    /// A bundle with no networks yet.
    pub fn empty(arch: ArchConfig) -> Result<Self> {
        arch.validate()?;
        Ok(Self {
            arch,
            generator: None,
            encoder: None,
            discriminator: None,
            refiner: None,
            version: env!("CARGO_PKG_VERSION").to_string(),
            meta: BTreeMap::new(),
        })
    }

    /// Names of the networks present, in archive order.
    pub fn networks(&self) -> Vec<&'static str> {
        [
            ("generator", self.generator.is_some()),
            ("encoder", self.encoder.is_some()),
            ("discriminator", self.discriminator.is_some()),
            ("refiner", self.refiner.is_some()),
        ]
        .into_iter()
        .filter_map(|(n, present)| present.then_some(n))
        .collect()
    }

    fn net<'a>(net: &'a Option<Sequential>, what: &str) -> Result<&'a Sequential> {
        net.as_ref().ok_or_else(|| Error::Config(format!("bundle has no {what}")))
    }

    fn check_image(&self, img: &Image) -> Result<()> {
        let r = self.arch.resolution;
        if (img.height(), img.width()) != (r, r) {
            return Err(shape_err!(
                "bundle expects {r}x{r} images, got {}x{}",
                img.height(),
                img.width()
            ));
        }
        Ok(())
    }

    pub fn generate(&self, z: &[f32]) -> Result<Image> {
        if z.len() != self.arch.latent_dim {
            return Err(shape_err!(
                "latent code has {} values, bundle expects {}",
                z.len(),
                self.arch.latent_dim
            ));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateInput("latent code is not finite".into()));
        }
        let t = Tensor::from_vec([1, z.len(), 1, 1], z.to_vec())?;
        Image::from_tensor(&Self::net(&self.generator, "generator")?.infer(&t)?, 0)
    }

    pub fn encode(&self, img: &Image) -> Result<Vec<f32>> {
        self.check_image(img)?;
        Ok(Self::net(&self.encoder, "encoder")?.infer(&img.to_tensor())?.into_vec())
    }

    /// Artifact score in `[0, 1]`.
    pub fn discriminate(&self, img: &Image) -> Result<f32> {
        self.check_image(img)?;
        let d = Self::net(&self.discriminator, "artifact discriminator")?;
        let s = d.infer(&img.to_tensor())?.data()[0];
        Ok(if s.is_nan() { 0.0 } else { s.clamp(0.0, 1.0) })
    }

    pub fn refine(&self, img: &Image) -> Result<Image> {
        self.refiner
            .as_ref()
            .ok_or_else(|| Error::Config("bundle has no refiner".into()))?
            .refine(img)
    }
}
