//! Procedural crack tiles: a mottled concrete-like background with dark
//! meandering cracks whose pixels form the mask.

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::refine::{count_crack_pixels, ImageSample, CRACK};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub side: u32,
    pub max_cracks: u32,
    /// Crack half-width in pixels.
    pub half_width: f64,
    /// Probability that a tile contains no crack at all.
    pub empty_probability: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            side: 256,
            max_cracks: 2,
            half_width: 1.5,
            empty_probability: 0.0,
        }
    }
}

fn draw_disc(mask: &mut GrayImage, cx: f64, cy: f64, r: f64) {
    let (w, h) = mask.dimensions();
    let x0 = (cx - r).floor().max(0.0) as u32;
    let y0 = (cy - r).floor().max(0.0) as u32;
    let x1 = ((cx + r).ceil() as i64).clamp(0, i64::from(w) - 1) as u32;
    let y1 = ((cy + r).ceil() as i64).clamp(0, i64::from(h) - 1) as u32;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (dx, dy) = (f64::from(x) + 0.5 - cx, f64::from(y) + 0.5 - cy);
            if dx * dx + dy * dy <= r * r {
                mask.put_pixel(x, y, Luma([CRACK]));
            }
        }
    }
}

/// One tile; identical `(cfg, seed)` give identical output.
pub fn crack_tile(cfg: &SyntheticConfig, seed: u64) -> ImageSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = cfg.side;
    let s = f64::from(side);
    let mut mask = GrayImage::new(side, side);

    let cracks = if rng.gen_bool(cfg.empty_probability.clamp(0.0, 1.0)) {
        0
    } else {
        rng.gen_range(1..=cfg.max_cracks.max(1))
    };
    for _ in 0..cracks {
        // start on the left or top edge and walk across the tile
        let (mut x, mut y, mut heading) = if rng.gen_bool(0.5) {
            (0.0, rng.gen_range(0.2 * s..0.8 * s), rng.gen_range(-0.5..0.5f64))
        } else {
            (rng.gen_range(0.2 * s..0.8 * s), 0.0, std::f64::consts::FRAC_PI_2 + rng.gen_range(-0.5..0.5f64))
        };
        let r = cfg.half_width * rng.gen_range(0.8..1.4);
        while (0.0..s).contains(&x) && (0.0..s).contains(&y) {
            draw_disc(&mut mask, x, y, r);
            heading += rng.gen_range(-0.25..0.25);
            x += heading.cos();
            y += heading.sin();
        }
    }

    let base: f64 = rng.gen_range(140.0..190.0);
    let grain = Normal::new(0.0, 9.0).expect("positive std");
    // low-frequency shading so the background is not flat
    let (fx, fy, ph) = (rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0), rng.gen_range(0.0..6.28));
    let crack_level: f64 = rng.gen_range(35.0..75.0);
    let image = RgbImage::from_fn(side, side, |x, y| {
        let u = f64::from(x) / s * std::f64::consts::TAU;
        let v = f64::from(y) / s * std::f64::consts::TAU;
        let shade = 12.0 * (fx * u + ph).sin() * (fy * v).cos();
        let level = if mask.get_pixel(x, y).0[0] == CRACK {
            crack_level
        } else {
            base + shade
        };
        let g: f64 = grain.sample(&mut rng);
        let px = |tint: f64| (level + g + tint).round().clamp(0.0, 255.0) as u8;
        Rgb([px(2.0), px(0.0), px(-3.0)])
    });
    let crack_pixels = count_crack_pixels(&mask);
    ImageSample {
        id: format!("synthetic_{seed}"),
        source: "synthetic".into(),
        image,
        mask,
        crack_pixels,
    }
}

/// `n` tiles with seeds `seed, seed + 1, ...`.
pub fn crack_tiles(cfg: &SyntheticConfig, n: usize, seed: u64) -> Vec<ImageSample> {
    (0..n as u64).map(|i| crack_tile(cfg, seed.wrapping_add(i))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::refine::is_binary;

    #[test]
    fn deterministic_binary_tiles() {
        let cfg = SyntheticConfig {
            side: 64,
            ..Default::default()
        };
        let a = crack_tile(&cfg, 4);
        assert_eq!(a, crack_tile(&cfg, 4));
        assert_ne!(a.image, crack_tile(&cfg, 5).image);
        assert!(is_binary(&a.mask));
        assert!(a.crack_pixels > 0 && a.crack_pixels < 64 * 64 / 2);
        let empty = crack_tile(
            &SyntheticConfig {
                empty_probability: 1.0,
                ..cfg
            },
            4,
        );
        assert_eq!(empty.crack_pixels, 0);
    }
}
