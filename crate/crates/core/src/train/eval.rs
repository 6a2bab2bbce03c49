//! Checkpoint evaluation and mask export.

use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use image::{GrayImage, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::trainer::{normalization, write_json};
use crate::checkpoint;
use crate::data::loader::{image_to_chw, read_rgb};
use crate::data::refine::{BACKGROUND, CRACK};
use crate::data::{DatasetManifest, Split, TileDataset};
use crate::error::{Error, Result};
use crate::metrics::{aggregate_report, confusion_counts, ConfusionCounts, MetricReport};
use crate::model::HybridSegmentor;
use crate::nn::Mode;

pub const EVAL_BATCH: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageCounts {
    pub id: String,
    pub counts: ConfusionCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub checkpoint: PathBuf,
    pub split: Split,
    pub report: MetricReport,
    pub per_image: Vec<ImageCounts>,
}

/// Deterministic eval-mode inference over `data`, micro-aggregated.
pub fn evaluate_model(model: &HybridSegmentor, data: &TileDataset, threshold: f64) -> Result<(MetricReport, Vec<ImageCounts>)> {
    if data.is_empty() {
        return Err(Error::EmptySplit("nothing to evaluate".into()));
    }
    let norm = normalization(model);
    let (dtype, device) = (model.store().dtype(), model.store().device().clone());
    let mut per_image = Vec::with_capacity(data.len());
    for idx in data.batch_indices(EVAL_BATCH, None) {
        let batch = data.batch(&idx, &norm, dtype, &device)?;
        let pred = model.forward(&batch.images, Mode::Eval)?;
        for (i, id) in batch.ids.into_iter().enumerate() {
            per_image.push(ImageCounts {
                id,
                counts: confusion_counts(&pred.get(i)?, &batch.masks.get(i)?, threshold)?,
            });
        }
    }
    let counts: Vec<ConfusionCounts> = per_image.iter().map(|c| c.counts).collect();
    Ok((aggregate_report(&counts, threshold)?, per_image))
}

/// Loads `ckpt`, evaluates one split of `manifest` and, if `record_path` is
/// given, writes the report with per-image counts as JSON.
pub fn evaluate(
    ckpt: &Path,
    manifest: &DatasetManifest,
    split: Split,
    threshold: f64,
    record_path: Option<&Path>,
) -> Result<MetricReport> {
    let (model, _) = checkpoint::load(ckpt, &Device::Cpu)?;
    let data = TileDataset::from_manifest(manifest, split, model.config().input_size)?;
    let (report, per_image) = evaluate_model(&model, &data, threshold)?;
    if let Some(p) = record_path {
        let rec = EvaluationRecord {
            checkpoint: ckpt.to_path_buf(),
            split,
            report: report.clone(),
            per_image,
        };
        write_json(p, &rec)?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probabilities: Vec<f32>,
    pub mask: GrayImage,
    pub tiles: usize,
    pub covered: (u32, u32),
}

impl Prediction {
    pub fn margin(&self) -> (u32, u32) {
        (self.mask.width() - self.covered.0, self.mask.height() - self.covered.1)
    }
}

/// Segments an image of any size at least one model tile, tiling without
/// overlap from the top-left. Uncovered right/bottom margins are background.
pub fn predict_image(model: &HybridSegmentor, img: &RgbImage, threshold: f64) -> Result<Prediction> {
    let (th, tw) = model.config().input_size;
    let (th, tw) = (th as u32, tw as u32);
    let (w, h) = img.dimensions();
    if w < tw || h < th {
        return Err(Error::Dimension(format!("image {w}x{h} is smaller than one {tw}x{th} tile")));
    }
    let (cols, rows) = (w / tw, h / th);
    let norm = normalization(model);
    let (dtype, device) = (model.store().dtype(), model.store().device().clone());
    let mut probabilities = vec![0f32; (w * h) as usize];
    for r in 0..rows {
        for c in 0..cols {
            let tile = image::imageops::crop_imm(img, c * tw, r * th, tw, th).to_image();
            let x = Tensor::from_vec(image_to_chw(&tile, &norm), (1, 3, th as usize, tw as usize), &device)?
                .to_dtype(dtype)?;
            let p = model
                .forward(&x, Mode::Eval)?
                .to_dtype(candle_core::DType::F32)?
                .flatten_all()?
                .to_vec1::<f32>()?;
            for y in 0..th {
                for xx in 0..tw {
                    let dst = ((r * th + y) * w + c * tw + xx) as usize;
                    probabilities[dst] = p[(y * tw + xx) as usize];
                }
            }
        }
    }
    let covered = (cols * tw, rows * th);
    let mask = GrayImage::from_fn(w, h, |x, y| {
        let inside = x < covered.0 && y < covered.1;
        let on = inside && f64::from(probabilities[(y * w + x) as usize]) > threshold;
        Luma([if on { CRACK } else { BACKGROUND }])
    });
    Ok(Prediction {
        probabilities,
        mask,
        tiles: (rows * cols) as usize,
        covered,
    })
}

/// Input on the left, input with crack pixels painted red on the right.
pub fn overlay(img: &RgbImage, mask: &GrayImage) -> RgbImage {
    let (w, h) = img.dimensions();
    RgbImage::from_fn(2 * w, h, |x, y| {
        if x < w {
            *img.get_pixel(x, y)
        } else if mask.get_pixel(x - w, y).0[0] == CRACK {
            Rgb([255, 0, 0])
        } else {
            *img.get_pixel(x - w, y)
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionNote {
    pub input: PathBuf,
    pub mask: PathBuf,
    pub overlay: Option<PathBuf>,
    pub width: u32,
    pub height: u32,
    pub tiles: usize,
    pub margin_right: u32,
    pub margin_bottom: u32,
    pub crack_pixels: u64,
    pub note: Option<String>,
}

/// Writes `<stem>_mask.png`, optionally `<stem>_overlay.png`, and a
/// `<stem>_mask.json` note for every input.
pub fn predict_files(
    model: &HybridSegmentor,
    inputs: &[PathBuf],
    out_dir: &Path,
    threshold: f64,
    with_overlay: bool,
) -> Result<Vec<PredictionNote>> {
    std::fs::create_dir_all(out_dir)?;
    let mut notes = Vec::with_capacity(inputs.len());
    for input in inputs {
        let img = read_rgb(input)?;
        let pred = predict_image(model, &img, threshold)?;
        let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        let mask_path = out_dir.join(format!("{stem}_mask.png"));
        pred.mask.save(&mask_path)?;
        let overlay_path = if with_overlay {
            let p = out_dir.join(format!("{stem}_overlay.png"));
            overlay(&img, &pred.mask).save(&p)?;
            Some(p)
        } else {
            None
        };
        let (mr, mb) = pred.margin();
        let note = PredictionNote {
            input: input.clone(),
            mask: mask_path,
            overlay: overlay_path,
            width: img.width(),
            height: img.height(),
            tiles: pred.tiles,
            margin_right: mr,
            margin_bottom: mb,
            crack_pixels: crate::data::refine::count_crack_pixels(&pred.mask),
            note: (mr > 0 || mb > 0).then(|| {
                format!("right {mr}px and bottom {mb}px not covered by a full tile; emitted as background")
            }),
        };
        write_json(&out_dir.join(format!("{stem}_mask.json")), &note)?;
        notes.push(note);
    }
    Ok(notes)
}
