//! Frozen convolutional backbones whose pooled activations feed the style loss.

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::imaging::Image;
use crate::models::read_archive;
use crate::nn::{Activation, Layer, Sequential, Tape};
use crate::tensor::{Float, Tensor};

/// Ordered tapped activations, one `[n, C_j, H_j, W_j]` tensor per tap.
pub type FeatureStack<T = f32> = Vec<Tensor<T>>;

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Which backbone to build and where its weights come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExtractorSpec {
    /// VGG-16 blocks 1-3 tapped after each pool. Widths are divided by
    /// `width_divisor`; weights come from `weights` (an archive with
    /// `"{layer}.weight"`/`"{layer}.bias"` tensors) or a seeded He init.
    Vgg16 {
        #[serde(default = "one")]
        width_divisor: usize,
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        weights: Option<PathBuf>,
    },
    /// Two conv + relu + average-pool stages, for tests and gradient checks.
    Toy {
        #[serde(default)]
        seed: u64,
    },
}

fn one() -> usize {
    1
}

impl Default for ExtractorSpec {
    fn default() -> Self {
        ExtractorSpec::Vgg16 {
            width_divisor: 1,
            seed: 0,
            weights: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FeatureExtractor<T: Float = f32> {
    net: Sequential<T>,
    taps: Vec<usize>,
    pools: usize,
    mean: [f64; 3],
    std: [f64; 3],
    provenance: String,
}

impl<T: Float> FeatureExtractor<T> {
    pub fn build(spec: &ExtractorSpec) -> Result<Self> {
        match spec {
            ExtractorSpec::Toy { seed } => Ok(Self::toy(*seed)),
            ExtractorSpec::Vgg16 {
                width_divisor,
                seed,
                weights,
            } => {
                let mut fx = Self::vgg16(*width_divisor, *seed)?;
                if let Some(path) = weights {
                    fx.load_weights(path)?;
                }
                Ok(fx)
            }
        }
    }

    pub fn vgg16(width_divisor: usize, seed: u64) -> Result<Self> {
        if width_divisor == 0 || 64 % width_divisor != 0 {
            return Err(Error::Config(format!(
                "vgg width divisor must divide 64, got {width_divisor}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut taps = Vec::new();
        let mut cin = 3;
        for (width, convs) in [(64, 2), (128, 2), (256, 3)] {
            let cout = width / width_divisor;
            for _ in 0..convs {
                layers.push(Layer::conv(cin, cout, 3, 1, 0.0, &mut rng));
                layers.push(Layer::Act(Activation::Relu));
                cin = cout;
            }
            layers.push(Layer::MaxPool2);
            taps.push(layers.len() - 1);
        }
        Ok(Self {
            net: Sequential::new(layers),
            taps,
            pools: 3,
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
            provenance: format!("vgg16-pool1-3 width/{width_divisor}, random he-init seed {seed}"),
        })
    }

    pub fn toy(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = vec![
            Layer::conv(3, 4, 3, 1, 0.0, &mut rng),
            Layer::Act(Activation::Relu),
            Layer::AvgPool2,
            Layer::conv(4, 8, 3, 1, 0.0, &mut rng),
            Layer::Act(Activation::Relu),
            Layer::AvgPool2,
        ];
        Self {
            net: Sequential::new(layers),
            taps: vec![2, 5],
            pools: 2,
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
            provenance: format!("toy 2-layer, random he-init seed {seed}"),
        }
    }

    fn load_weights(&mut self, path: &std::path::Path) -> Result<()> {
        let archive = read_archive(path)?;
        let mut stored: std::collections::BTreeMap<_, _> = archive.tensors.into_iter().collect();
        for (name, slot) in self.net.named_params_mut() {
            let values = stored
                .remove(&name)
                .ok_or_else(|| Error::Checkpoint(format!("backbone weights lack {name}")))?;
            if values.len() != slot.len() {
                return Err(Error::Checkpoint(format!("backbone tensor {name} has the wrong size")));
            }
            *slot = values.into_iter().map(|v| T::from_f64_lossy(v as f64)).collect();
        }
        self.provenance = format!("vgg16-pool1-3 weights from {}", path.display());
        Ok(())
    }

    pub fn net(&self) -> &Sequential<T> {
        &self.net
    }

    pub fn tap_count(&self) -> usize {
        self.taps.len()
    }

    /// Where the weights came from; stored alongside trained refiners.
    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    /// Smallest accepted side length.
    pub fn min_size(&self) -> usize {
        1 << self.pools
    }

    /// Same network in another precision.
    pub fn cast<U: Float>(&self) -> FeatureExtractor<U> {
        let layers = self.net.layers().iter().map(|l| l.cast::<U>()).collect();
        FeatureExtractor {
            net: Sequential::new(layers),
            taps: self.taps.clone(),
            pools: self.pools,
            mean: self.mean,
            std: self.std,
            provenance: self.provenance.clone(),
        }
    }

    fn check(&self, x: &Tensor<T>) -> Result<()> {
        let [_, c, h, w] = x.shape();
        let k = self.min_size();
        if c != 3 || h < k || w < k || h % k != 0 || w % k != 0 {
            return Err(shape_err!(
                "feature extractor needs 3-channel input with sides divisible by {k}, got {:?}",
                x.shape()
            ));
        }
        Ok(())
    }

    /// Maps canonical `[-1, 1]` values to the backbone's normalisation.
    fn normalize(&self, x: &Tensor<T>) -> Tensor<T> {
        let [n, c, h, w] = x.shape();
        let mut out = x.clone();
        let hw = h * w;
        for (i, plane) in out.data_mut().chunks_mut(hw).enumerate() {
            let ch = i % c;
            let half = T::from_f64_lossy(0.5);
            let mean = T::from_f64_lossy(self.mean[ch]);
            let inv = T::from_f64_lossy(1.0 / self.std[ch]);
            for v in plane {
                *v = ((*v + T::one()) * half - mean) * inv;
            }
        }
        debug_assert_eq!(out.len(), n * c * hw);
        out
    }

    pub fn extract(&self, x: &Tensor<T>) -> Result<FeatureStack<T>> {
        self.check(x)?;
        self.net.infer_taps(&self.normalize(x), &self.taps)
    }

    pub fn extract_image(&self, img: &Image) -> Result<FeatureStack<T>> {
        self.extract(&img.to_tensor())
    }

    /// Features plus the tape needed by [`FeatureExtractor::backward`].
    pub fn extract_traced(&self, x: &Tensor<T>) -> Result<(FeatureStack<T>, Tape<T>)> {
        self.check(x)?;
        let (_, feats, tape) = self.net.forward_eval(&self.normalize(x), &self.taps)?;
        Ok((feats, tape))
    }

    /// Gradient with respect to the `[-1, 1]` input, given one gradient per tap.
    pub fn backward(&self, tape: Tape<T>, grads: Vec<Tensor<T>>) -> Result<Tensor<T>> {
        if grads.len() != self.taps.len() {
            return Err(shape_err!("expected {} tap gradients, got {}", self.taps.len(), grads.len()));
        }
        let injections = self.taps.iter().copied().zip(grads).collect();
        let mut dx = self.net.backward_taps_input(tape, injections)?;
        let [_, c, h, w] = dx.shape();
        for (i, plane) in dx.data_mut().chunks_mut(h * w).enumerate() {
            let k = T::from_f64_lossy(0.5 / self.std[i % c]);
            plane.iter_mut().for_each(|v| *v *= k);
        }
        Ok(dx)
    }
}
