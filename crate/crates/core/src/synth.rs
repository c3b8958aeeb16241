//! Procedural face-like images for desk-scale training runs.
//!
//! Each image is a cartoon head on a gradient background: skin-toned face
//! ellipse, hair cap, eyes, nose and mouth, with optional beard and glasses.
//! Faces are rendered at twice the target size and box-filtered down, then
//! a little pixel noise is added so blur in a hole has texture to remove.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::imaging::{save_image, Image};

type Rgb = [f64; 3];

const SKIN: [Rgb; 5] = [
    [0.96, 0.80, 0.69],
    [0.89, 0.70, 0.57],
    [0.76, 0.57, 0.44],
    [0.58, 0.41, 0.30],
    [0.40, 0.27, 0.19],
];

const HAIR: [Rgb; 5] = [
    [0.10, 0.08, 0.07],
    [0.30, 0.19, 0.11],
    [0.55, 0.38, 0.20],
    [0.85, 0.72, 0.45],
    [0.60, 0.60, 0.62],
];

fn jitter(rng: &mut ChaCha8Rng, c: Rgb, amount: f64) -> Rgb {
    c.map(|v| (v + rng.random_range(-amount..=amount)).clamp(0.0, 1.0))
}

fn mix(a: Rgb, b: Rgb, t: f64) -> Rgb {
    [0, 1, 2].map(|i| a[i] * (1.0 - t) + b[i] * t)
}

/// Signed ellipse "radius": < 1 inside.
fn ellipse(x: f64, y: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> f64 {
    ((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2)
}

struct Face {
    bg_top: Rgb,
    bg_bottom: Rgb,
    skin: Rgb,
    hair: Rgb,
    iris: Rgb,
    lips: Rgb,
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    hair_depth: f64,
    eye_dx: f64,
    eye_y: f64,
    eye_r: f64,
    mouth_y: f64,
    mouth_w: f64,
    light: f64,
    beard: bool,
    glasses: Option<Rgb>,
}

impl Face {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let skin = SKIN[rng.random_range(0..SKIN.len())];
        let skin = jitter(rng, skin, 0.04);
        let hair = HAIR[rng.random_range(0..HAIR.len())];
        let hair = jitter(rng, hair, 0.05);
        let bg: Rgb = [rng.random(), rng.random(), rng.random()];
        Face {
            bg_top: bg,
            bg_bottom: jitter(rng, mix(bg, [0.5; 3], 0.5), 0.2),
            skin,
            hair,
            iris: jitter(rng, [0.25, 0.3, 0.35], 0.2),
            lips: jitter(rng, mix(skin, [0.75, 0.25, 0.3], 0.6), 0.05),
            cx: rng.random_range(0.46..0.54),
            cy: rng.random_range(0.50..0.58),
            rx: rng.random_range(0.27..0.34),
            ry: rng.random_range(0.34..0.41),
            hair_depth: rng.random_range(0.25..0.55),
            eye_dx: rng.random_range(0.10..0.14),
            eye_y: rng.random_range(-0.10..-0.04),
            eye_r: rng.random_range(0.035..0.05),
            mouth_y: rng.random_range(0.15..0.21),
            mouth_w: rng.random_range(0.07..0.12),
            light: rng.random_range(-0.15..0.15),
            beard: rng.random_bool(0.3),
            glasses: rng.random_bool(0.25).then(|| jitter(rng, [0.1, 0.1, 0.1], 0.1)),
        }
    }

    /// Colour at normalised coordinates `(x, y)` in `[0, 1]²`.
    fn shade(&self, x: f64, y: f64) -> Rgb {
        let mut c = mix(self.bg_top, self.bg_bottom, y);
        let head = ellipse(x, y, self.cx, self.cy, self.rx, self.ry);
        // hair: larger ellipse behind the head, visible above the hairline
        let hair_shell = ellipse(x, y, self.cx, self.cy - 0.02, self.rx * 1.12, self.ry * 1.08);
        let hairline = self.cy - self.ry * (1.0 - self.hair_depth);
        if hair_shell < 1.0 && (y < hairline || head >= 1.0) && y < self.cy + self.ry * 0.2 {
            c = self.hair;
        }
        if head < 1.0 && y >= hairline {
            let side = (x - self.cx) / self.rx;
            let lit = 1.0 + self.light * side - 0.08 * head;
            c = self.skin.map(|v| (v * lit).clamp(0.0, 1.0));
            if self.beard && y > self.cy + self.ry * 0.25 {
                c = mix(c, self.hair, 0.8);
            }
            let ey = self.cy + self.eye_y;
            for s in [-1.0, 1.0] {
                let ex = self.cx + s * self.eye_dx;
                let e = ellipse(x, y, ex, ey, self.eye_r * 1.5, self.eye_r);
                if e < 1.0 {
                    c = [0.95, 0.95, 0.93];
                    if ellipse(x, y, ex, ey, self.eye_r * 0.8, self.eye_r * 0.8) < 1.0 {
                        c = self.iris;
                    }
                    if ellipse(x, y, ex, ey, self.eye_r * 0.35, self.eye_r * 0.35) < 1.0 {
                        c = [0.02, 0.02, 0.02];
                    }
                }
                if let Some(frame) = self.glasses {
                    let ring = ellipse(x, y, ex, ey, self.eye_r * 2.4, self.eye_r * 2.0);
                    if (0.75..1.0).contains(&ring) {
                        c = frame;
                    }
                }
            }
            if let Some(frame) = self.glasses {
                let bridge = (y - ey).abs() < 0.008 && (x - self.cx).abs() < self.eye_dx - self.eye_r * 2.0;
                if bridge {
                    c = frame;
                }
            }
            let nose = ellipse(x, y, self.cx, self.cy + 0.05, 0.025, 0.05);
            if nose < 1.0 {
                c = c.map(|v| v * 0.88);
            }
            let mouth = ellipse(x, y, self.cx, self.cy + self.mouth_y, self.mouth_w, 0.025);
            if mouth < 1.0 {
                c = self.lips;
            }
        }
        c
    }
}

/// Renders one face at `size × size`, deterministic in `seed`.
pub fn synth_face(size: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let face = Face::random(&mut rng);
    let ss = 2;
    let big = size * ss;
    let mut acc = vec![0.0f64; 3 * size * size];
    for py in 0..big {
        for px in 0..big {
            let c = face.shade((px as f64 + 0.5) / big as f64, (py as f64 + 0.5) / big as f64);
            let (y, x) = (py / ss, px / ss);
            for (ch, v) in c.iter().enumerate() {
                acc[(ch * size + y) * size + x] += v;
            }
        }
    }
    let noise = Normal::new(0.0, 0.015).expect("valid sigma");
    let norm = (ss * ss) as f64;
    let data = acc
        .into_iter()
        .map(|v| {
            let unit = (v / norm + noise.sample(&mut rng)).clamp(0.0, 1.0);
            (2.0 * unit - 1.0) as f32
        })
        .collect();
    Image::new(size, size, data).expect("synthetic image in range")
}

/// `count` faces; face `i` uses seed `seed + i`.
pub fn synth_faces(count: usize, size: usize, seed: u64) -> Vec<Image> {
    (0..count).map(|i| synth_face(size, seed.wrapping_add(i as u64))).collect()
}

/// Writes `face_{i:05}.png` files and returns their paths.
pub fn write_faces(dir: &Path, count: usize, size: usize, seed: u64) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    (0..count)
        .map(|i| {
            let path = dir.join(format!("face_{i:05}.png"));
            save_image(&synth_face(size, seed.wrapping_add(i as u64)), &path)?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn faces_are_deterministic_and_varied() {
        let a = synth_face(32, 5);
        assert_eq!(a, synth_face(32, 5));
        assert_ne!(a, synth_face(32, 6));
        assert_eq!((a.height(), a.width()), (32, 32));
        // the face centre is skin, not background, so it differs from the corner
        let centre: Vec<f32> = (0..3).map(|c| a.get(c, 18, 16)).collect();
        let corner: Vec<f32> = (0..3).map(|c| a.get(c, 0, 0)).collect();
        assert_ne!(centre, corner);
    }
}
