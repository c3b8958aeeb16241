//! Seeded generators for rectangular and free-form brush masks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Mask;
use crate::error::{Error, Result};

/// Axis-aligned rectangle in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// What [`gen_mask`] should draw. Coverage is the hole fraction `[lo, hi]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MaskSpec {
    Rectangular {
        rect: Option<Rect>,
        coverage: (f64, f64),
    },
    IrregularBrush {
        coverage: (f64, f64),
        /// Stroke radius range in pixels; defaults to 5–15 px at 64 px, scaled.
        radius: Option<(f64, f64)>,
    },
}

impl MaskSpec {
    pub fn rect(rect: Rect) -> Self {
        MaskSpec::Rectangular {
            rect: Some(rect),
            coverage: (0.0, 0.9),
        }
    }

    pub fn brush(lo: f64, hi: f64) -> Self {
        MaskSpec::IrregularBrush {
            coverage: (lo, hi),
            radius: None,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            MaskSpec::Rectangular { .. } => "rectangular",
            MaskSpec::IrregularBrush { .. } => "irregular_brush",
        }
    }
}

const MAX_ATTEMPTS: usize = 200;

fn check_coverage((lo, hi): (f64, f64), allow_zero_lo: bool) -> Result<()> {
    let lo_ok = if allow_zero_lo { lo >= 0.0 } else { lo > 0.0 };
    if !(lo_ok && lo <= hi && hi <= 0.9) {
        return Err(Error::Generation(format!(
            "coverage range [{lo}, {hi}] must lie in (0, 0.9] with lo <= hi"
        )));
    }
    Ok(())
}

/// Draws a square `size × size` mask. Same spec and seed give the same mask.
pub fn gen_mask(size: usize, spec: &MaskSpec, seed: u64) -> Result<Mask> {
    if size == 0 {
        return Err(Error::Generation("mask size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match spec {
        MaskSpec::Rectangular { rect: Some(r), .. } => {
            if r.height == 0 || r.width == 0 || r.top + r.height > size || r.left + r.width > size {
                return Err(Error::Generation(format!("rectangle {r:?} does not fit a {size} px mask")));
            }
            let m = rect_mask(size, r);
            check_coverage((m.hole_fraction(), m.hole_fraction()), false)?;
            Ok(m)
        }
        MaskSpec::Rectangular { rect: None, coverage } => {
            check_coverage(*coverage, false)?;
            random_rect(size, *coverage, &mut rng)
        }
        MaskSpec::IrregularBrush { coverage, radius } => {
            check_coverage(*coverage, false)?;
            let scale = size as f64 / 64.0;
            let (rlo, rhi) = radius.unwrap_or((5.0 * scale, 15.0 * scale));
            if !(rlo > 0.0 && rlo <= rhi) {
                return Err(Error::Generation(format!("bad brush radius range [{rlo}, {rhi}]")));
            }
            brush(size, *coverage, (rlo, rhi), &mut rng)
        }
    }
}

fn rect_mask(size: usize, r: &Rect) -> Mask {
    Mask::from_fn(size, size, |y, x| {
        !(y >= r.top && y < r.top + r.height && x >= r.left && x < r.left + r.width)
    })
}

fn random_rect(size: usize, (lo, hi): (f64, f64), rng: &mut ChaCha8Rng) -> Result<Mask> {
    let area = (size * size) as f64;
    for _ in 0..MAX_ATTEMPTS {
        let frac = rng.random_range(lo..=hi);
        let aspect: f64 = rng.random_range(0.5..=2.0);
        let h = ((frac * area / aspect).sqrt().round() as usize).clamp(1, size);
        let w = ((frac * area / h as f64).round() as usize).clamp(1, size);
        let r = Rect {
            top: rng.random_range(0..=size - h),
            left: rng.random_range(0..=size - w),
            height: h,
            width: w,
        };
        let m = rect_mask(size, &r);
        let cov = m.hole_fraction();
        if cov >= lo && cov <= hi {
            return Ok(m);
        }
    }
    Err(Error::Generation(format!(
        "no rectangle with coverage in [{lo}, {hi}] at {size} px"
    )))
}

fn brush(size: usize, (lo, hi): (f64, f64), (rlo, rhi): (f64, f64), rng: &mut ChaCha8Rng) -> Result<Mask> {
    let n = size * size;
    let max_turn = std::f64::consts::FRAC_PI_4;
    for _ in 0..MAX_ATTEMPTS {
        let mut hole = vec![false; n];
        let mut holes = 0usize;
        'strokes: for _ in 0..64 {
            let radius = rng.random_range(rlo..=rhi);
            let mut p = (rng.random_range(0.0..size as f64), rng.random_range(0.0..size as f64));
            let mut heading = rng.random_range(0.0..std::f64::consts::TAU);
            let segments = rng.random_range(3..=8);
            for _ in 0..segments {
                heading += rng.random_range(-max_turn..=max_turn);
                let len = rng.random_range(size as f64 / 16.0..=size as f64 / 5.0);
                let q = (
                    (p.0 + len * heading.cos()).clamp(0.0, size as f64),
                    (p.1 + len * heading.sin()).clamp(0.0, size as f64),
                );
                holes += stamp_segment(&mut hole, size, p, q, radius);
                p = q;
                if holes as f64 >= lo * n as f64 {
                    break 'strokes;
                }
            }
        }
        let cov = holes as f64 / n as f64;
        if cov >= lo && cov <= hi {
            return Ok(Mask::from_fn(size, size, |y, x| !hole[y * size + x]));
        }
    }
    Err(Error::Generation(format!(
        "brush strokes never landed in coverage [{lo}, {hi}] at {size} px"
    )))
}

/// Marks pixels whose centre lies within `r` of segment `a–b`; returns how
/// many were newly marked. Points are `(x, y)`.
fn stamp_segment(hole: &mut [bool], size: usize, a: (f64, f64), b: (f64, f64), r: f64) -> usize {
    let bound = |v: f64| (v.max(0.0) as usize).min(size - 1);
    let (x0, x1) = (bound(a.0.min(b.0) - r), bound(a.0.max(b.0) + r));
    let (y0, y1) = (bound(a.1.min(b.1) - r), bound(a.1.max(b.1) + r));
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let mut added = 0;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let t = if len2 > 0.0 {
                (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let (ex, ey) = (a.0 + t * dx - px, a.1 + t * dy - py);
            let cell = &mut hole[y * size + x];
            if !*cell && ex * ex + ey * ey <= r * r {
                *cell = true;
                added += 1;
            }
        }
    }
    added
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn explicit_rectangle_is_exact() {
        let r = Rect {
            top: 2,
            left: 3,
            height: 4,
            width: 5,
        };
        let m = gen_mask(16, &MaskSpec::rect(r), 0).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                let inside = (2..6).contains(&y) && (3..8).contains(&x);
                assert_eq!(m.is_known(y, x), !inside);
            }
        }
    }

    #[test]
    fn rejects_bad_requests() {
        assert!(matches!(gen_mask(64, &MaskSpec::brush(0.0, 0.2), 1), Err(Error::Generation(_))));
        assert!(matches!(gen_mask(64, &MaskSpec::brush(0.3, 0.95), 1), Err(Error::Generation(_))));
        assert!(matches!(gen_mask(64, &MaskSpec::brush(0.3, 0.2), 1), Err(Error::Generation(_))));
        let whole = Rect {
            top: 0,
            left: 0,
            height: 8,
            width: 8,
        };
        assert!(gen_mask(8, &MaskSpec::rect(whole), 1).is_err());
        let spill = Rect { top: 6, ..whole };
        assert!(gen_mask(16, &MaskSpec::rect(spill), 1).is_ok());
        assert!(gen_mask(8, &MaskSpec::rect(Rect { height: 3, ..spill }), 1).is_err());
    }

    #[test]
    fn brush_is_deterministic() {
        let spec = MaskSpec::brush(0.1, 0.25);
        assert_eq!(gen_mask(64, &spec, 42).unwrap(), gen_mask(64, &spec, 42).unwrap());
        assert_ne!(gen_mask(64, &spec, 42).unwrap(), gen_mask(64, &spec, 43).unwrap());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn brush_coverage_lands_in_range(seed in any::<u64>()) {
            let m = gen_mask(64, &MaskSpec::brush(0.10, 0.25), seed).unwrap();
            let holes = m.data().iter().filter(|&&v| v == 0).count();
            let cov = holes as f64 / 4096.0;
            prop_assert!((0.10..=0.25).contains(&cov), "coverage {}", cov);
        }

        #[test]
        fn random_rect_coverage_lands_in_range(seed in any::<u64>(), lo in 0.05f64..0.4) {
            let spec = MaskSpec::Rectangular { rect: None, coverage: (lo, lo + 0.1) };
            let m = gen_mask(64, &spec, seed).unwrap();
            prop_assert!(m.hole_fraction() >= lo && m.hole_fraction() <= lo + 0.1);
        }
    }
}
