//! Dataset preparation, manifests and batch loading.

pub mod loader;
pub mod manifest;
pub mod prepare;
pub mod refine;
pub mod synthetic;

pub use loader::{Batch, Normalization, TileDataset};
pub use manifest::{crack_proportion, split_manifest, DatasetManifest, ManifestRecord, Split};
pub use prepare::{prepare_dataset, PrepareOptions, SourceSpec};
pub use refine::{augment, select_for_augmentation, tile_non_overlapping, ImageSample};
