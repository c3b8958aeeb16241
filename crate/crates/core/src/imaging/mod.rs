//! Pixel containers, compositing, fill policies and mask generation.
//!
//! Images live in the canonical `[-1, 1]` range, stored as three planar
//! channels (`c·H·W + y·W + x`). Masks use 1 for known pixels and 0 for the
//! hole to be filled.

mod io;
mod masks;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Float, Tensor};

pub use io::{
    decode_image, decode_image_native, decode_mask, decode_sketch, encode_mask_png, encode_png, encode_sketch_png, gray_from_png,
    load_image, load_mask, load_sketch, save_image, save_mask, save_sketch, u8_to_unit, unit_to_u8,
};
pub use masks::{gen_mask, MaskSpec, Rect};

pub const CHANNELS: usize = 3;

/// An RGB image with values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    /// Validates length and range.
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != CHANNELS * height * width {
            return Err(shape_err!(
                "{height}x{width} image needs {} values, got {}",
                CHANNELS * height * width,
                data.len()
            ));
        }
        if let Some(v) = data.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::Format(format!("pixel value {v} outside [-1, 1]")));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, color: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(CHANNELS * height * width);
        for c in color {
            data.extend(std::iter::repeat_n(c.clamp(-1.0, 1.0), height * width));
        }
        Self { height, width, data }
    }

    /// Builds an image from `f(channel, y, x)`, clamping into range.
    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(CHANNELS * height * width);
        for c in 0..CHANNELS {
            for y in 0..height {
                for x in 0..width {
                    data.push(sanitize(f(c, y, x)));
                }
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let hw = self.height * self.width;
        &self.data[c * hw..(c + 1) * hw]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// `[1, 3, H, W]` tensor view (a copy).
    pub fn to_tensor<T: Float>(&self) -> Tensor<T> {
        Tensor::from_vec(
            [1, CHANNELS, self.height, self.width],
            self.data.iter().map(|&v| T::from_f64_lossy(v as f64)).collect(),
        )
        .expect("image tensor shape")
    }

    /// Converts batch item `n` of a 3-channel tensor, clamping into `[-1, 1]`.
    pub fn from_tensor<T: Float>(t: &Tensor<T>, n: usize) -> Result<Self> {
        let [_, c, h, w] = t.shape();
        if c != CHANNELS {
            return Err(shape_err!("expected a 3-channel tensor, got {c} channels"));
        }
        let data = t.item(n).iter().map(|v| sanitize(v.to_f64_lossy() as f32)).collect();
        Ok(Self {
            height: h,
            width: w,
            data,
        })
    }

    fn expect_size(&self, height: usize, width: usize, what: &str) -> Result<()> {
        if (self.height, self.width) != (height, width) {
            return Err(shape_err!(
                "{what} is {}x{}, expected {height}x{width}",
                self.height,
                self.width
            ));
        }
        Ok(())
    }

    /// Bilinear resampling with half-pixel centres.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Self {
        if (height, width) == (self.height, self.width) {
            return self.clone();
        }
        let mut data = Vec::with_capacity(CHANNELS * height * width);
        for c in 0..CHANNELS {
            resize_plane(self.plane(c), (self.height, self.width), (height, width), &mut data);
        }
        Self { height, width, data }
    }

    /// Averages `factor × factor` blocks.
    pub fn downsample_box(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.height % factor != 0 || self.width % factor != 0 {
            return Err(shape_err!(
                "cannot box-downsample {}x{} by {factor}",
                self.height,
                self.width
            ));
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let inv = 1.0 / (factor * factor) as f32;
        let mut data = Vec::with_capacity(CHANNELS * h * w);
        for c in 0..CHANNELS {
            let p = self.plane(c);
            for y in 0..h {
                for x in 0..w {
                    let mut s = 0.0;
                    for dy in 0..factor {
                        for dx in 0..factor {
                            s += p[(y * factor + dy) * self.width + x * factor + dx];
                        }
                    }
                    data.push(sanitize(s * inv));
                }
            }
        }
        Ok(Self {
            height: h,
            width: w,
            data,
        })
    }

    /// Mean absolute difference over the pixels where `region` is true.
    pub fn mean_abs_diff(&self, other: &Image, region: impl Fn(usize) -> bool) -> f64 {
        let hw = self.height * self.width;
        let mut sum = 0.0;
        let mut n = 0usize;
        for (i, (a, b)) in self.data.iter().zip(&other.data).enumerate() {
            if region(i % hw) {
                sum += (a - b).abs() as f64;
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }
}

fn sanitize(v: f32) -> f32 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(-1.0, 1.0)
    }
}

fn resize_plane(src: &[f32], (sh, sw): (usize, usize), (dh, dw): (usize, usize), out: &mut Vec<f32>) {
    let coord = |o: usize, s: usize, d: usize| -> (usize, usize, f32) {
        let f = ((o as f32 + 0.5) * s as f32 / d as f32 - 0.5).max(0.0);
        let i0 = (f.floor() as usize).min(s - 1);
        let i1 = (i0 + 1).min(s - 1);
        (i0, i1, f - i0 as f32)
    };
    for y in 0..dh {
        let (y0, y1, fy) = coord(y, sh, dh);
        for x in 0..dw {
            let (x0, x1, fx) = coord(x, sw, dw);
            let top = src[y0 * sw + x0] * (1.0 - fx) + src[y0 * sw + x1] * fx;
            let bot = src[y1 * sw + x0] * (1.0 - fx) + src[y1 * sw + x1] * fx;
            out.push(sanitize(top * (1.0 - fy) + bot * fy));
        }
    }
}

/// Binary mask; 1 marks a known pixel, 0 a pixel to be filled.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(shape_err!("{height}x{width} mask needs {} values", height * width));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Format("mask values must be 0 or 1".into()));
        }
        Ok(Self { height, width, data })
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![1; height * width],
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, known: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(known(y, x) as u8);
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn is_known(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    /// Known-ness of flat pixel index `i`.
    pub fn known_at(&self, i: usize) -> bool {
        self.data[i] == 1
    }

    /// Fraction of pixels in the hole.
    pub fn hole_fraction(&self) -> f64 {
        let holes = self.data.iter().filter(|&&v| v == 0).count();
        holes as f64 / self.data.len().max(1) as f64
    }

    pub fn known_count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    /// Nearest-neighbour resampling; keeps the mask binary.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Self {
        Self::from_fn(height, width, |y, x| {
            let sy = (y * self.height) / height;
            let sx = (x * self.width) / width;
            self.is_known(sy, sx)
        })
    }

    /// `[1, 1, H, W]` tensor of 0/1 values.
    pub fn to_tensor<T: Float>(&self) -> Tensor<T> {
        Tensor::from_vec(
            [1, 1, self.height, self.width],
            self.data.iter().map(|&v| if v == 1 { T::one() } else { T::zero() }).collect(),
        )
        .expect("mask tensor shape")
    }

    fn check_pair(&self, img: &Image, what: &str) -> Result<()> {
        img.expect_size(self.height, self.width, what)
    }
}

/// User strokes drawn inside the hole.
#[derive(Clone, Debug, PartialEq)]
pub struct Sketch {
    height: usize,
    width: usize,
    color: Image,
    alpha: Vec<f32>,
}

impl Sketch {
    pub fn new(color: Image, alpha: Vec<f32>) -> Result<Self> {
        let (height, width) = (color.height(), color.width());
        if alpha.len() != height * width {
            return Err(shape_err!("sketch alpha must have {} values", height * width));
        }
        if alpha.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::Format("sketch alpha outside [0, 1]".into()));
        }
        Ok(Self {
            height,
            width,
            color,
            alpha,
        })
    }

    pub fn color(&self) -> &Image {
        &self.color
    }

    pub fn alpha(&self) -> &[f32] {
        &self.alpha
    }

    /// Zeroes alpha on known pixels, so strokes only exist inside the hole.
    pub fn clipped_to(mut self, mask: &Mask) -> Result<Self> {
        if (mask.height, mask.width) != (self.height, self.width) {
            return Err(shape_err!("sketch and mask sizes differ"));
        }
        for (a, &m) in self.alpha.iter_mut().zip(&mask.data) {
            if m == 1 {
                *a = 0.0;
            }
        }
        Ok(self)
    }

    pub fn resize(&self, height: usize, width: usize) -> Result<Self> {
        let color = self.color.resize_bilinear(height, width);
        let mut alpha = Vec::with_capacity(height * width);
        resize_plane(&self.alpha, (self.height, self.width), (height, width), &mut alpha);
        Self::new(color, alpha.into_iter().map(|a| a.clamp(0.0, 1.0)).collect())
    }
}

/// How the hole is initialised before the first cycle.
#[derive(Clone, Debug, PartialEq)]
pub enum FillPolicy {
    /// Per-channel mean of the known region.
    Mean,
    /// Gaussian samples, clipped to range.
    ZeroMeanNoise { sigma: f32, seed: u64 },
    Constant { color: [f32; 3] },
    /// Mid-grey base overwritten by the sketch strokes.
    Sketch(Sketch),
}

pub const DEFAULT_NOISE_SIGMA: f32 = 0.25;

impl FillPolicy {
    pub fn white() -> Self {
        FillPolicy::Constant { color: [1.0; 3] }
    }

    pub fn black() -> Self {
        FillPolicy::Constant { color: [-1.0; 3] }
    }

    pub fn noise(seed: u64) -> Self {
        FillPolicy::ZeroMeanNoise {
            sigma: DEFAULT_NOISE_SIGMA,
            seed,
        }
    }

    /// Serializable description (sketch pixels are referenced by file name).
    pub fn record(&self) -> FillRecord {
        match self {
            FillPolicy::Mean => FillRecord::Mean,
            FillPolicy::ZeroMeanNoise { sigma, seed } => FillRecord::Noise {
                sigma: *sigma,
                seed: *seed,
            },
            FillPolicy::Constant { color } => FillRecord::Constant { color: *color },
            FillPolicy::Sketch(_) => FillRecord::Sketch {
                file: "sketch.png".into(),
            },
        }
    }
}

/// Manifest form of a [`FillPolicy`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FillRecord {
    Mean,
    Noise { sigma: f32, seed: u64 },
    Constant { color: [f32; 3] },
    Sketch { file: String },
}

/// Blends `known` and `fill` through the mask: known pixels come from `known`,
/// hole pixels from `fill`. Values are copied, never arithmetically mixed, so
/// both regions are bit-exact.
fn blend(known: &Image, m: &Mask, fill: &Image) -> Result<Image> {
    m.check_pair(known, "known-region image")?;
    m.check_pair(fill, "fill image")?;
    let hw = m.height * m.width;
    let data = known
        .data
        .iter()
        .zip(&fill.data)
        .enumerate()
        .map(|(i, (&a, &b))| if m.data[i % hw] == 1 { a } else { b })
        .collect();
    Ok(Image {
        height: known.height,
        width: known.width,
        data,
    })
}

/// Next-cycle input: original pixels where known, previous output in the hole.
pub fn compose_cycle_input(i_org: &Image, m: &Mask, i_prev: &Image) -> Result<Image> {
    blend(i_org, m, i_prev)
}

/// Refined composite: coarse result where known, refiner output in the hole.
pub fn compose_refined(i_crg: &Image, m: &Mask, i_unet: &Image) -> Result<Image> {
    blend(i_crg, m, i_unet)
}

/// Initial cycle input: known pixels untouched, the hole filled per `policy`.
pub fn apply_fill(i_org: &Image, m: &Mask, policy: &FillPolicy) -> Result<Image> {
    m.check_pair(i_org, "image")?;
    let (h, w) = (m.height, m.width);
    let hw = h * w;
    let filler = match policy {
        FillPolicy::Mean => {
            let known = m.known_count();
            if known == 0 {
                return Err(Error::DegenerateInput(
                    "mean fill needs at least one known pixel".into(),
                ));
            }
            let mut color = [0f32; 3];
            for (c, slot) in color.iter_mut().enumerate() {
                let s: f64 = i_org
                    .plane(c)
                    .iter()
                    .zip(&m.data)
                    .filter(|(_, &k)| k == 1)
                    .map(|(&v, _)| v as f64)
                    .sum();
                *slot = (s / known as f64) as f32;
            }
            Image::filled(h, w, color)
        }
        FillPolicy::ZeroMeanNoise { sigma, seed } => {
            if !(*sigma > 0.0 && sigma.is_finite()) {
                return Err(Error::Config(format!("noise sigma must be positive, got {sigma}")));
            }
            let normal = Normal::new(0.0f32, *sigma).map_err(|e| Error::Config(e.to_string()))?;
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let data = (0..CHANNELS * hw).map(|_| normal.sample(&mut rng).clamp(-1.0, 1.0)).collect();
            Image::new(h, w, data)?
        }
        FillPolicy::Constant { color } => {
            if color.iter().any(|c| !(-1.0..=1.0).contains(c)) {
                return Err(Error::Config(format!("constant colour {color:?} outside [-1, 1]")));
            }
            Image::filled(h, w, *color)
        }
        FillPolicy::Sketch(s) => {
            if (s.height, s.width) != (h, w) {
                return Err(shape_err!("sketch is {}x{}, image is {h}x{w}", s.height, s.width));
            }
            let base = 0.0f32;
            let mut data = vec![base; CHANNELS * hw];
            for c in 0..CHANNELS {
                let color = s.color.plane(c);
                for i in 0..hw {
                    let a = s.alpha[i];
                    if a > 0.0 {
                        data[c * hw + i] = sanitize(a * color[i] + (1.0 - a) * base);
                    }
                }
            }
            Image::new(h, w, data)?
        }
    };
    blend(i_org, m, &filler)
}
