//! Paired geometric augmentation: one random shift/flip applied identically
//! to every tensor of a training triple.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::AugmentConfig;
use crate::imaging::{Image, Mask};

/// A translation with symmetric-reflect padding followed by optional flips.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Transform {
    pub dx: isize,
    pub dy: isize,
    pub hflip: bool,
    pub vflip: bool,
}

/// Symmetric reflection of `i` into `0..n` (edge pixel repeated).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

impl Transform {
    pub const IDENTITY: Self = Self {
        dx: 0,
        dy: 0,
        hflip: false,
        vflip: false,
    };

    pub fn sample(cfg: &AugmentConfig, size: usize, rng: &mut ChaCha8Rng) -> Self {
        let max = (cfg.max_shift * size as f64).floor() as i64;
        let mut shift = || if max > 0 { rng.random_range(-max..=max) as isize } else { 0 };
        let (dx, dy) = (shift(), shift());
        Self {
            dx,
            dy,
            hflip: cfg.hflip && rng.random_bool(0.5),
            vflip: cfg.vflip && rng.random_bool(0.5),
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    /// Source coordinate of output pixel `(y, x)`.
    fn source(&self, y: usize, x: usize, h: usize, w: usize) -> (usize, usize) {
        let y = if self.vflip { h - 1 - y } else { y };
        let x = if self.hflip { w - 1 - x } else { x };
        (reflect(y as isize - self.dy, h), reflect(x as isize - self.dx, w))
    }

    pub fn apply_image(&self, img: &Image) -> Image {
        if self.is_identity() {
            return img.clone();
        }
        let (h, w) = (img.height(), img.width());
        Image::from_fn(h, w, |c, y, x| {
            let (sy, sx) = self.source(y, x, h, w);
            img.get(c, sy, sx)
        })
    }

    pub fn apply_mask(&self, m: &Mask) -> Mask {
        if self.is_identity() {
            return m.clone();
        }
        let (h, w) = (m.height(), m.width());
        Mask::from_fn(h, w, |y, x| {
            let (sy, sx) = self.source(y, x, h, w);
            m.is_known(sy, sx)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn ramp() -> Image {
        Image::from_fn(8, 8, |c, y, x| (c * 64 + y * 8 + x) as f32 / 200.0)
    }

    #[test]
    fn reflect_repeats_the_edge() {
        let got: Vec<usize> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![2, 1, 0, 0, 1, 2, 3, 3, 2, 1]);
    }

    #[test]
    fn shift_moves_content_and_pads_by_reflection() {
        let img = ramp();
        let t = Transform {
            dx: 2,
            ..Transform::IDENTITY
        };
        let out = t.apply_image(&img);
        assert_eq!(out.get(1, 3, 5), img.get(1, 3, 3));
        assert_eq!(out.get(0, 0, 0), img.get(0, 0, 1));
        assert_eq!(out.get(0, 0, 1), img.get(0, 0, 0));
    }

    #[test]
    fn double_flip_is_identity_and_mask_follows_image() {
        let img = ramp();
        let flip = Transform {
            hflip: true,
            vflip: true,
            ..Transform::IDENTITY
        };
        assert_eq!(flip.apply_image(&flip.apply_image(&img)), img);
        let m = Mask::from_fn(8, 8, |y, x| y < 3 || x > 5);
        let cfg = AugmentConfig {
            max_shift: 0.25,
            hflip: true,
            vflip: true,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let t = Transform::sample(&cfg, 8, &mut rng);
            assert!(t.dx.abs() <= 2 && t.dy.abs() <= 2);
            // a mask rendered as an image transforms the same way
            let as_img = Image::from_fn(8, 8, |_, y, x| m.is_known(y, x) as u8 as f32);
            let ti = t.apply_image(&as_img);
            let tm = t.apply_mask(&m);
            for y in 0..8 {
                for x in 0..8 {
                    assert_eq!(ti.get(0, y, x) == 1.0, tm.is_known(y, x));
                }
            }
        }
    }
}
