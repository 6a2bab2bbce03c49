//! Loss sweep and encoder-path ablation drivers plus their report tables.

use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::Device;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::eval::evaluate_model;
use super::trainer::{RunRecord, Trainer};
use crate::checkpoint;
use crate::data::{DatasetManifest, Split, TileDataset};
use crate::error::{Error, Result};
use crate::losses::{LossKind, LossSpec};
use crate::metrics::MetricReport;
use crate::model::PathMode;

pub const METRIC_COLUMNS: [&str; 5] = ["Accuracy", "Precision", "Recall", "F1 (Dice)", "IoU"];
pub const SWEEP_LAMBDAS: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];
pub const SINGLE_LOSSES: [LossKind; 3] = [LossKind::Dice, LossKind::Bce, LossKind::RecallCe];
pub const ABLATION_LAMBDA: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub report: MetricReport,
    pub best_epoch: usize,
    pub run_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub key_column: String,
    pub rows: Vec<ReportRow>,
}

impl ReportTable {
    /// Plain-text table, metric columns at three decimals.
    pub fn render(&self) -> String {
        let key_w = self
            .rows
            .iter()
            .map(|r| r.label.len())
            .chain(std::iter::once(self.key_column.len()))
            .max()
            .unwrap_or(0);
        let col_w = METRIC_COLUMNS.iter().map(|c| c.len()).max().unwrap_or(0);
        let mut out = format!("{:<key_w$}", self.key_column);
        for c in METRIC_COLUMNS {
            out.push_str(&format!("  {c:>col_w$}"));
        }
        out.push('\n');
        out.push_str(&"-".repeat(key_w + METRIC_COLUMNS.len() * (col_w + 2)));
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("{:<key_w$}", r.label));
            for v in r.report.values() {
                out.push_str(&format!("  {v:>col_w$.3}"));
            }
            out.push('\n');
        }
        out
    }

    /// Writes `<stem>.txt` and `<stem>.jsonl` (one row per line).
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("{stem}.txt")), self.render())?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join(format!("{stem}.jsonl")))?);
        for r in &self.rows {
            serde_json::to_writer(&mut f, r)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Loss configurations in report order: Dice, BCE-Dice for each lambda, BCE,
/// RecallCE. Single losses not listed in `singles` are left out.
pub fn sweep_specs(lambdas: &[f64], singles: &[LossKind]) -> Vec<LossSpec> {
    let mut specs = Vec::new();
    if singles.contains(&LossKind::Dice) {
        specs.push(LossSpec::dice());
    }
    specs.extend(lambdas.iter().map(|&l| LossSpec::bce_dice(l)));
    if singles.contains(&LossKind::Bce) {
        specs.push(LossSpec::bce());
    }
    if singles.contains(&LossKind::RecallCe) {
        specs.push(LossSpec::recall_ce());
    }
    specs
}

fn slug(label: &str) -> String {
    let s: String = label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' { c.to_ascii_lowercase() } else { '_' })
        .collect();
    s.split('_').filter(|p| !p.is_empty()).collect::<Vec<_>>().join("_")
}

/// Trains each configuration from scratch, then scores its best checkpoint on
/// the test split.
pub fn run_experiments(
    manifest: &DatasetManifest,
    runs: Vec<(String, TrainConfig)>,
    key_column: &str,
    out_dir: &Path,
) -> Result<ReportTable> {
    if runs.is_empty() {
        return Err(Error::Config("no experiment configurations".into()));
    }
    let mut rows = Vec::with_capacity(runs.len());
    for (label, cfg) in runs {
        let run_dir = out_dir.join(slug(&label));
        log::info!("run `{label}` -> {}", run_dir.display());
        let trainer = Trainer::new(cfg.clone(), &run_dir)?;
        let (_, record): (_, RunRecord) = trainer.fit_manifest(manifest)?;
        let (best, _) = checkpoint::load(&record.best_checkpoint, &Device::Cpu)?;
        let test = TileDataset::from_manifest(manifest, Split::Test, cfg.model.input_size)?;
        let (report, _) = evaluate_model(&best, &test, cfg.threshold)?;
        rows.push(ReportRow {
            label,
            report,
            best_epoch: record.best_epoch,
            run_dir,
        });
    }
    Ok(ReportTable {
        key_column: key_column.into(),
        rows,
    })
}

pub fn run_loss_sweep(
    manifest: &DatasetManifest,
    base: &TrainConfig,
    lambdas: &[f64],
    singles: &[LossKind],
    out_dir: &Path,
) -> Result<ReportTable> {
    let runs = sweep_specs(lambdas, singles)
        .into_iter()
        .map(|loss| {
            let label = loss.label();
            (label, TrainConfig { loss, ..base.clone() })
        })
        .collect();
    let table = run_experiments(manifest, runs, "Loss (lambda)", out_dir)?;
    table.write(out_dir, "loss_sweep")?;
    Ok(table)
}

/// Fused, CNN-only and transformer-only models under the same seed and a
/// BCE-Dice loss with lambda 0.5.
pub fn run_ablation(manifest: &DatasetManifest, base: &TrainConfig, out_dir: &Path) -> Result<ReportTable> {
    let runs = [PathMode::Fused, PathMode::CnnOnly, PathMode::TransformerOnly]
        .into_iter()
        .map(|paths| {
            let mut cfg = base.clone();
            cfg.loss = LossSpec::bce_dice(ABLATION_LAMBDA);
            cfg.model = cfg.model.with_paths(paths);
            (paths.label().to_string(), cfg)
        })
        .collect();
    let table = run_experiments(manifest, runs, "Model", out_dir)?;
    table.write(out_dir, "ablation")?;
    Ok(table)
}
