//! Directory-level dataset preparation: read every source, harmonize masks,
//! tile, augment crack-rich tiles and write PNGs plus a manifest.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::loader::{read_gray, read_rgb};
use super::manifest::{DatasetManifest, ManifestRecord};
use super::refine::{
    augment, binarize_mask, invert_mask, refine_mask_morphology, select_for_augmentation, tile_non_overlapping,
    ImageSample, AUGMENT_THRESHOLD, DEFAULT_NOISE_SIGMA, DEFAULT_TILE,
};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp", "tif", "tiff"];

/// One input dataset. Crack sources hold `images/` and `masks/` with masks
/// matched by file stem; non-crack sources hold images only (in `images/` or
/// directly in `dir`).
#[derive(Debug, Clone, PartialEq)]
pub struct SourceSpec {
    pub name: String,
    pub dir: PathBuf,
    /// Masks mark cracks dark on a light background.
    pub invert: bool,
    pub morph_kernel: Option<u32>,
    pub non_crack: bool,
}

impl SourceSpec {
    pub fn crack(name: impl Into<String>, dir: impl Into<PathBuf>) -> Self {
        Self {
            name: name.into(),
            dir: dir.into(),
            invert: false,
            morph_kernel: None,
            non_crack: false,
        }
    }

    pub fn non_crack(name: impl Into<String>, dir: impl Into<PathBuf>) -> Self {
        Self {
            non_crack: true,
            ..Self::crack(name, dir)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrepareOptions {
    pub sources: Vec<SourceSpec>,
    pub out_dir: PathBuf,
    pub tile: u32,
    pub augment: bool,
    pub augment_threshold: u64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl PrepareOptions {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        Self {
            sources: Vec::new(),
            out_dir: out_dir.into(),
            tile: DEFAULT_TILE,
            augment: true,
            augment_threshold: AUGMENT_THRESHOLD,
            noise_sigma: DEFAULT_NOISE_SIGMA,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PrepareSummary {
    pub images: usize,
    pub tiles: usize,
    pub augmented: usize,
    pub dropped_images: usize,
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let p = entry?.path();
        let ok = p
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
            .unwrap_or(false);
        if ok && p.is_file() {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn stem(p: &Path) -> String {
    p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string()
}

/// Harmonized full-resolution samples of one source.
pub fn load_source(spec: &SourceSpec) -> Result<Vec<ImageSample>> {
    let images_dir = spec.dir.join("images");
    let images_dir = if images_dir.is_dir() { images_dir } else { spec.dir.clone() };
    if !images_dir.is_dir() {
        return Err(Error::Config(format!("source directory {} does not exist", spec.dir.display())));
    }
    let images = list_images(&images_dir)?;
    let mut samples = Vec::with_capacity(images.len());
    if spec.non_crack {
        for p in images {
            let mut s = ImageSample::non_crack(format!("{}_{}", spec.name, stem(&p)), read_rgb(&p)?);
            s.source = spec.name.clone();
            samples.push(s);
        }
        return Ok(samples);
    }
    let masks: HashMap<String, PathBuf> = list_images(&spec.dir.join("masks"))?
        .into_iter()
        .map(|p| (stem(&p), p))
        .collect();
    for p in images {
        let key = stem(&p);
        let mask_path = masks
            .get(&key)
            .ok_or_else(|| Error::Config(format!("no mask for {} in source `{}`", p.display(), spec.name)))?;
        let mut mask = read_gray(mask_path)?;
        if spec.invert {
            mask = invert_mask(&mask);
        }
        mask = binarize_mask(&mask);
        if let Some(k) = spec.morph_kernel {
            mask = refine_mask_morphology(&mask, k)?;
        }
        samples.push(ImageSample::new(format!("{}_{key}", spec.name), &spec.name, read_rgb(&p)?, mask)?);
    }
    Ok(samples)
}

fn write_tile(out_dir: &Path, s: &ImageSample, augmented: bool, parent: Option<String>) -> Result<ManifestRecord> {
    let tile_path = PathBuf::from("tiles").join(format!("{}.png", s.id));
    let mask_path = PathBuf::from("masks").join(format!("{}.png", s.id));
    s.image.save(out_dir.join(&tile_path))?;
    s.mask.save(out_dir.join(&mask_path))?;
    Ok(ManifestRecord {
        id: s.id.clone(),
        tile_path,
        mask_path,
        source: s.source.clone(),
        width: s.width(),
        height: s.height(),
        crack_pixels: s.crack_pixels,
        augmented,
        parent,
        split: None,
    })
}

/// Runs the whole preparation and writes `manifest.jsonl` in `out_dir`.
pub fn prepare_dataset(opts: &PrepareOptions) -> Result<(DatasetManifest, PrepareSummary)> {
    if opts.sources.is_empty() {
        return Err(Error::Config("no sources given".into()));
    }
    if opts.tile == 0 {
        return Err(Error::Config("tile size must be positive".into()));
    }
    std::fs::create_dir_all(opts.out_dir.join("tiles"))?;
    std::fs::create_dir_all(opts.out_dir.join("masks"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut records = Vec::new();
    let mut summary = PrepareSummary::default();
    for spec in &opts.sources {
        for sample in load_source(spec)? {
            summary.images += 1;
            let tiles = tile_non_overlapping(&sample, opts.tile);
            if tiles.is_empty() {
                log::warn!("{} is smaller than one {}px tile; skipped", sample.id, opts.tile);
                summary.dropped_images += 1;
            }
            for t in tiles {
                records.push(write_tile(&opts.out_dir, &t, false, None)?);
                summary.tiles += 1;
                if opts.augment && select_for_augmentation(&t, opts.augment_threshold) {
                    let a = augment(&t, rng.next_u64(), opts.noise_sigma)?;
                    records.push(write_tile(&opts.out_dir, &a, true, Some(t.id.clone()))?);
                    summary.augmented += 1;
                }
            }
        }
    }
    let manifest = DatasetManifest::new(records, &opts.out_dir);
    manifest.save(&opts.out_dir.join(MANIFEST_FILE))?;
    Ok((manifest, summary))
}
