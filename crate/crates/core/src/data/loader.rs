//! Turning tiles into normalized image and mask batches.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use image::{GrayImage, RgbImage};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::manifest::{DatasetManifest, Split};
use super::refine::{ImageSample, CRACK};
use crate::error::{Error, Result};

/// Per-channel mean/std applied after scaling to [0, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Normalization {
    pub fn identity() -> Self {
        Self {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path)
        .map_err(|source| Error::ImageRead {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8())
}

pub fn read_gray(path: &Path) -> Result<GrayImage> {
    Ok(image::open(path)
        .map_err(|source| Error::ImageRead {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8())
}

/// CHW floats, normalized.
pub fn image_to_chw(img: &RgbImage, norm: &Normalization) -> Vec<f32> {
    let (w, h) = img.dimensions();
    let plane = (w * h) as usize;
    let mut out = vec![0f32; 3 * plane];
    for (i, p) in img.pixels().enumerate() {
        for c in 0..3 {
            let v = f64::from(p.0[c]) / 255.0;
            out[c * plane + i] = ((v - norm.mean[c]) / norm.std[c]) as f32;
        }
    }
    out
}

pub fn mask_to_binary(mask: &GrayImage) -> Vec<f32> {
    mask.pixels().map(|p| if p.0[0] == CRACK { 1.0 } else { 0.0 }).collect()
}

#[derive(Debug, Clone)]
enum Item {
    Files { id: String, tile: PathBuf, mask: PathBuf },
    Memory(Box<ImageSample>),
}

#[derive(Debug)]
pub struct Batch {
    pub ids: Vec<String>,
    /// B×3×H×W
    pub images: Tensor,
    /// B×1×H×W with values in {0, 1}
    pub masks: Tensor,
}

/// Tiles of a fixed size, loaded on demand from disk or held in memory.
#[derive(Debug, Clone)]
pub struct TileDataset {
    items: Vec<Item>,
    size: (usize, usize),
}

impl TileDataset {
    pub fn from_manifest(manifest: &DatasetManifest, split: Split, size: (usize, usize)) -> Result<Self> {
        let items: Vec<Item> = manifest
            .subset(split)
            .into_iter()
            .map(|r| {
                if (r.height as usize, r.width as usize) != size {
                    return Err(Error::Dimension(format!(
                        "tile `{}` is {}x{}, model expects {}x{}",
                        r.id, r.height, r.width, size.0, size.1
                    )));
                }
                Ok(Item::Files {
                    id: r.id.clone(),
                    tile: manifest.resolve(&r.tile_path),
                    mask: manifest.resolve(&r.mask_path),
                })
            })
            .collect::<Result<_>>()?;
        if items.is_empty() {
            return Err(Error::EmptySplit(format!("{split} split has no tiles")));
        }
        Ok(Self { items, size })
    }

    pub fn from_samples(samples: Vec<ImageSample>) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Empty("no samples".into()))?;
        let size = (first.height() as usize, first.width() as usize);
        if let Some(bad) = samples
            .iter()
            .find(|s| (s.height() as usize, s.width() as usize) != size)
        {
            return Err(Error::Dimension(format!("sample `{}` differs in size", bad.id)));
        }
        Ok(Self {
            items: samples.into_iter().map(|s| Item::Memory(Box::new(s))).collect(),
            size,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn size(&self) -> (usize, usize) {
        self.size
    }

    fn load(&self, i: usize) -> Result<(String, RgbImage, GrayImage)> {
        match &self.items[i] {
            Item::Memory(s) => Ok((s.id.clone(), s.image.clone(), s.mask.clone())),
            Item::Files { id, tile, mask } => {
                let img = read_rgb(tile)?;
                let m = read_gray(mask)?;
                if img.dimensions() != m.dimensions()
                    || (img.height() as usize, img.width() as usize) != self.size
                {
                    return Err(Error::Dimension(format!("tile `{id}` has unexpected size")));
                }
                Ok((id.clone(), img, m))
            }
        }
    }

    pub fn batch(&self, indices: &[usize], norm: &Normalization, dtype: DType, device: &Device) -> Result<Batch> {
        let (h, w) = self.size;
        let mut ids = Vec::with_capacity(indices.len());
        let mut img_buf = Vec::with_capacity(indices.len() * 3 * h * w);
        let mut mask_buf = Vec::with_capacity(indices.len() * h * w);
        for &i in indices {
            let (id, img, m) = self.load(i)?;
            ids.push(id);
            img_buf.extend(image_to_chw(&img, norm));
            mask_buf.extend(mask_to_binary(&m));
        }
        let b = indices.len();
        Ok(Batch {
            ids,
            images: Tensor::from_vec(img_buf, (b, 3, h, w), device)?.to_dtype(dtype)?,
            masks: Tensor::from_vec(mask_buf, (b, 1, h, w), device)?.to_dtype(dtype)?,
        })
    }

    /// Index chunks of at most `batch_size`, shuffled when `seed` is given.
    pub fn batch_indices(&self, batch_size: usize, seed: Option<u64>) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        if let Some(s) = seed {
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(s));
        }
        idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
    }
}
