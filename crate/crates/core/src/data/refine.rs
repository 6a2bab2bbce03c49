//! Per-sample mask harmonization, tiling and augmentation.

use image::{imageops, GrayImage, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub const CRACK: u8 = 255;
pub const BACKGROUND: u8 = 0;
pub const DEFAULT_TILE: u32 = 256;
pub const AUGMENT_THRESHOLD: u64 = 5000;
pub const DEFAULT_NOISE_SIGMA: f64 = 0.05;

/// RGB image with its binary crack mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub id: String,
    pub source: String,
    pub image: RgbImage,
    pub mask: GrayImage,
    pub crack_pixels: u64,
}

impl ImageSample {
    pub fn new(id: impl Into<String>, source: impl Into<String>, image: RgbImage, mask: GrayImage) -> Result<Self> {
        if image.dimensions() != mask.dimensions() {
            return Err(Error::Shape(format!(
                "image {:?} and mask {:?} differ in size",
                image.dimensions(),
                mask.dimensions()
            )));
        }
        let crack_pixels = count_crack_pixels(&mask);
        Ok(Self {
            id: id.into(),
            source: source.into(),
            image,
            mask,
            crack_pixels,
        })
    }

    /// Crack-free sample: all-zero mask of the image's size.
    pub fn non_crack(id: impl Into<String>, image: RgbImage) -> Self {
        let (w, h) = image.dimensions();
        Self {
            id: id.into(),
            source: "non-crack".into(),
            image,
            mask: GrayImage::new(w, h),
            crack_pixels: 0,
        }
    }

    pub fn width(&self) -> u32 {
        self.image.width()
    }

    pub fn height(&self) -> u32 {
        self.image.height()
    }
}

pub fn count_crack_pixels(mask: &GrayImage) -> u64 {
    mask.pixels().filter(|p| p.0[0] == CRACK).count() as u64
}

pub fn is_binary(mask: &GrayImage) -> bool {
    mask.pixels().all(|p| p.0[0] == CRACK || p.0[0] == BACKGROUND)
}

pub fn invert_mask(mask: &GrayImage) -> GrayImage {
    let mut out = mask.clone();
    for p in out.pixels_mut() {
        p.0[0] = 255 - p.0[0];
    }
    out
}

/// Values above 255/2 become crack, the rest background.
pub fn binarize_mask(mask: &GrayImage) -> GrayImage {
    let mut out = mask.clone();
    for p in out.pixels_mut() {
        p.0[0] = if f64::from(p.0[0]) > 255.0 / 2.0 { CRACK } else { BACKGROUND };
    }
    out
}

fn window_op(mask: &GrayImage, radius: i64, want_all: bool) -> GrayImage {
    let (w, h) = mask.dimensions();
    let mut out = GrayImage::new(w, h);
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let mut any = false;
            let mut all = true;
            for dy in -radius..=radius {
                for dx in -radius..=radius {
                    let (yy, xx) = (y + dy, x + dx);
                    if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
                        continue;
                    }
                    let on = mask.get_pixel(xx as u32, yy as u32).0[0] == CRACK;
                    any |= on;
                    all &= on;
                }
            }
            let on = if want_all { all } else { any };
            out.put_pixel(x as u32, y as u32, Luma([if on { CRACK } else { BACKGROUND }]));
        }
    }
    out
}

/// Square-window dilation; out-of-image cells are ignored.
pub fn dilate(mask: &GrayImage, kernel: u32) -> GrayImage {
    window_op(mask, i64::from(kernel / 2), false)
}

/// Square-window erosion; out-of-image cells are ignored.
pub fn erode(mask: &GrayImage, kernel: u32) -> GrayImage {
    window_op(mask, i64::from(kernel / 2), true)
}

/// Morphological closing (dilate then erode) with an odd square element.
/// Fills pinholes and bridges one-pixel gaps in thin cracks.
pub fn refine_mask_morphology(mask: &GrayImage, kernel: u32) -> Result<GrayImage> {
    if kernel == 0 || kernel % 2 == 0 {
        return Err(Error::Config(format!("morphology kernel must be odd, got {kernel}")));
    }
    if !is_binary(mask) {
        return Err(Error::Config("morphology expects a binarized mask".into()));
    }
    Ok(erode(&dilate(mask, kernel), kernel))
}

/// Number of full `tile×tile` crops in a `width×height` image.
pub fn tile_count(width: u32, height: u32, tile: u32) -> u32 {
    (width / tile) * (height / tile)
}

/// Non-overlapping `tile×tile` crops from the top-left grid, row-major.
/// Partial edge tiles are dropped.
pub fn tile_non_overlapping(sample: &ImageSample, tile: u32) -> Vec<ImageSample> {
    if tile == 0 {
        return Vec::new();
    }
    let cols = sample.width() / tile;
    let rows = sample.height() / tile;
    let mut tiles = Vec::with_capacity((rows * cols) as usize);
    for r in 0..rows {
        for c in 0..cols {
            let (x, y) = (c * tile, r * tile);
            let image = imageops::crop_imm(&sample.image, x, y, tile, tile).to_image();
            let mask = imageops::crop_imm(&sample.mask, x, y, tile, tile).to_image();
            let crack_pixels = count_crack_pixels(&mask);
            tiles.push(ImageSample {
                id: format!("{}_r{r}_c{c}", sample.id),
                source: sample.source.clone(),
                image,
                mask,
                crack_pixels,
            });
        }
    }
    tiles
}

pub fn select_for_augmentation(sample: &ImageSample, threshold: u64) -> bool {
    sample.crack_pixels > threshold
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rotation {
    Deg90,
    Deg180,
    Deg270,
}

impl Rotation {
    pub const ALL: [Rotation; 3] = [Rotation::Deg90, Rotation::Deg180, Rotation::Deg270];

    pub fn degrees(self) -> u32 {
        match self {
            Rotation::Deg90 => 90,
            Rotation::Deg180 => 180,
            Rotation::Deg270 => 270,
        }
    }

    pub fn rotate_mask(self, mask: &GrayImage) -> GrayImage {
        match self {
            Rotation::Deg90 => imageops::rotate90(mask),
            Rotation::Deg180 => imageops::rotate180(mask),
            Rotation::Deg270 => imageops::rotate270(mask),
        }
    }

    pub fn rotate_image(self, image: &RgbImage) -> RgbImage {
        match self {
            Rotation::Deg90 => imageops::rotate90(image),
            Rotation::Deg180 => imageops::rotate180(image),
            Rotation::Deg270 => imageops::rotate270(image),
        }
    }
}

/// Additive Gaussian noise (`sigma` on the [0, 1] intensity scale, clamped)
/// then a seeded rotation by 90, 180 or 270 degrees applied to image and mask.
pub fn augment(sample: &ImageSample, seed: u64, sigma: f64) -> Result<ImageSample> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!("noise sigma {sigma} must be >= 0")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rotation = Rotation::ALL[rng.gen_range(0..3)];
    let normal = Normal::new(0.0, sigma * 255.0).map_err(|e| Error::Config(e.to_string()))?;
    let mut noisy = sample.image.clone();
    for p in noisy.pixels_mut() {
        let Rgb(ch) = p;
        for v in ch.iter_mut() {
            let n: f64 = normal.sample(&mut rng);
            *v = (f64::from(*v) + n).round().clamp(0.0, 255.0) as u8;
        }
    }
    let mask = rotation.rotate_mask(&sample.mask);
    Ok(ImageSample {
        id: format!("{}_aug{}", sample.id, rotation.degrees()),
        source: sample.source.clone(),
        image: rotation.rotate_image(&noisy),
        crack_pixels: count_crack_pixels(&mask),
        mask,
    })
}
