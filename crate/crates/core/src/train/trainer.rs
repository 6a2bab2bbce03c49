//! The training loop.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::schedule::{EarlyStopping, ReduceLrOnPlateau};
use crate::checkpoint::{self, TrainingMeta};
use crate::data::{DatasetManifest, Normalization, Split, TileDataset};
use crate::error::{Error, Result};
use crate::losses::SegmentationLoss;
use crate::metrics::{aggregate_report, confusion_counts, ConfusionCounts, MetricReport};
use crate::model::HybridSegmentor;
use crate::nn::Mode;

pub const BEST_CHECKPOINT: &str = "best.safetensors";
pub const RUN_RECORD: &str = "run.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStopping,
    MaxEpochs,
    TargetReached,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub learning_rate: f64,
    pub val_metrics: MetricReport,
    pub improved: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub loss: String,
    pub paths: String,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub best_checkpoint: PathBuf,
    pub stop_reason: StopReason,
}

impl RunRecord {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.iter().find(|e| e.epoch == self.best_epoch)
    }
}

pub fn normalization(model: &HybridSegmentor) -> Normalization {
    let cfg = model.config();
    Normalization {
        mean: cfg.input_mean,
        std: cfg.input_std,
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Eval-mode loss averaged over samples, with fixed unshuffled batches.
pub fn validation_loss(
    model: &HybridSegmentor,
    data: &TileDataset,
    loss: &dyn SegmentationLoss,
    batch_size: usize,
) -> Result<f64> {
    Ok(validate(model, data, loss, batch_size, 0.5)?.0)
}

/// Eval-mode loss plus per-image confusion counts.
pub fn validate(
    model: &HybridSegmentor,
    data: &TileDataset,
    loss: &dyn SegmentationLoss,
    batch_size: usize,
    threshold: f64,
) -> Result<(f64, Vec<ConfusionCounts>)> {
    let norm = normalization(model);
    let (dtype, device) = (model.store().dtype(), model.store().device().clone());
    let mut total = 0.0;
    let mut counts = Vec::with_capacity(data.len());
    for idx in data.batch_indices(batch_size, None) {
        let batch = data.batch(&idx, &norm, dtype, &device)?;
        let pred = model.forward(&batch.images, Mode::Eval)?.detach();
        total += scalar(&loss.compute(&pred, &batch.masks)?)? * idx.len() as f64;
        for i in 0..idx.len() {
            counts.push(confusion_counts(&pred.get(i)?, &batch.masks.get(i)?, threshold)?);
        }
    }
    Ok((total / data.len() as f64, counts))
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub device: Device,
    pub dtype: DType,
    /// Where `best.safetensors` and `run.json` are written.
    pub out_dir: PathBuf,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, out_dir: impl Into<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            device: Device::Cpu,
            dtype: DType::F32,
            out_dir: out_dir.into(),
        })
    }

    pub fn build_model(&self) -> Result<HybridSegmentor> {
        HybridSegmentor::new(&self.cfg.model, self.dtype, &self.device, self.cfg.seed)
    }

    pub fn fit_manifest(&self, manifest: &DatasetManifest) -> Result<(HybridSegmentor, RunRecord)> {
        let size = self.cfg.model.input_size;
        let train = TileDataset::from_manifest(manifest, Split::Train, size)?;
        let val = TileDataset::from_manifest(manifest, Split::Val, size)?;
        self.fit(&train, &val)
    }

    /// Trains a fresh model until early stopping, the epoch cap or the target
    /// F1; the best-validation weights are saved to `out_dir`.
    pub fn fit(&self, train: &TileDataset, val: &TileDataset) -> Result<(HybridSegmentor, RunRecord)> {
        let model = self.build_model()?;
        let record = self.fit_model(&model, train, val)?;
        Ok((model, record))
    }

    pub fn fit_model(&self, model: &HybridSegmentor, train: &TileDataset, val: &TileDataset) -> Result<RunRecord> {
        let cfg = &self.cfg;
        if train.is_empty() || val.is_empty() {
            return Err(Error::EmptySplit("train and val sets must be non-empty".into()));
        }
        std::fs::create_dir_all(&self.out_dir)?;
        let loss = cfg.loss.build()?;
        let norm = normalization(model);
        let mut opt = AdamW::new(
            model.store().trainable_vars(),
            ParamsAdamW {
                lr: cfg.learning_rate,
                weight_decay: 0.0,
                ..Default::default()
            },
        )?;
        let mut stopper = EarlyStopping::new(cfg.early_stop_patience, cfg.min_delta);
        let mut plateau = ReduceLrOnPlateau::new(
            cfg.learning_rate,
            cfg.scheduler.factor,
            cfg.scheduler.patience,
            cfg.scheduler.min_lr,
            cfg.min_delta,
        );
        let best_path = self.out_dir.join(BEST_CHECKPOINT);
        let mut epochs = Vec::new();
        let mut stop_reason = StopReason::MaxEpochs;

        for epoch in 1..=cfg.max_epochs {
            let lr = opt.learning_rate();
            let mut train_total = 0.0;
            let mut batches = train.batch_indices(cfg.batch_size, Some(cfg.seed.wrapping_add(epoch as u64)));
            // a lone trailing sample would leave batch norm nothing to normalise against
            if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
                let last = batches.pop().unwrap();
                batches.last_mut().unwrap().extend(last);
            }
            for (step, idx) in batches.into_iter().enumerate() {
                let batch = train.batch(&idx, &norm, self.dtype, &self.device)?;
                let pred = model.forward(&batch.images, Mode::Train)?;
                let l = loss.compute(&pred, &batch.masks)?;
                let value = scalar(&l)?;
                if !value.is_finite() {
                    return Err(Error::NonFiniteLoss { value, epoch, step });
                }
                opt.backward_step(&l)?;
                train_total += value * idx.len() as f64;
            }
            let train_loss = train_total / train.len() as f64;

            let (val_loss, counts) = validate(model, val, loss.as_ref(), cfg.batch_size, cfg.threshold)?;
            if !val_loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    value: val_loss,
                    epoch,
                    step: 0,
                });
            }
            let val_metrics = aggregate_report(&counts, cfg.threshold)?;
            let improved = stopper.update(val_loss);
            if improved {
                let meta = TrainingMeta {
                    epoch,
                    best_val_loss: val_loss,
                    seed: cfg.seed,
                    loss: Some(cfg.loss.label()),
                };
                checkpoint::save(model, &meta, &best_path)?;
            }
            opt.set_learning_rate(plateau.step(val_loss));
            log::info!(
                "epoch {epoch:>3} lr {lr:.2e} train {train_loss:.5} val {val_loss:.5} f1 {:.4}{}",
                val_metrics.f1,
                if improved { " *" } else { "" }
            );
            let f1 = val_metrics.f1;
            epochs.push(EpochRecord {
                epoch,
                train_loss,
                val_loss,
                learning_rate: lr,
                val_metrics,
                improved,
            });
            if cfg.target_val_f1.is_some_and(|t| f1 >= t) {
                stop_reason = StopReason::TargetReached;
                break;
            }
            if stopper.should_stop() {
                stop_reason = StopReason::EarlyStopping;
                break;
            }
        }

        let record = RunRecord {
            loss: cfg.loss.label(),
            paths: cfg.model.paths.label().to_string(),
            epochs,
            best_epoch: stopper.best_epoch(),
            best_val_loss: stopper.best(),
            best_checkpoint: best_path,
            stop_reason,
        };
        write_json(&self.out_dir.join(RUN_RECORD), &record)?;
        Ok(record)
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}
