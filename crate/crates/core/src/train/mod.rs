//! Training, evaluation, prediction and experiment drivers.

pub mod config;
pub mod eval;
pub mod experiments;
pub mod schedule;
pub mod trainer;

pub use config::{PlateauConfig, TrainConfig};
pub use eval::{evaluate, evaluate_model, predict_files, predict_image};
pub use experiments::{run_ablation, run_loss_sweep, ReportTable};
pub use schedule::{EarlyStopping, ReduceLrOnPlateau};
pub use trainer::{RunRecord, StopReason, Trainer};
