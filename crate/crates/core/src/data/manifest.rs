//! Tile manifest: one JSON record per line, paths relative to the manifest's
//! directory. Split seed and ratios live in a `.meta.json` sidecar.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_RATIOS: [f64; 3] = [0.8, 0.1, 0.1];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown split `{s}` (train, val, test)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub tile_path: PathBuf,
    pub mask_path: PathBuf,
    pub source: String,
    pub width: u32,
    pub height: u32,
    pub crack_pixels: u64,
    #[serde(default)]
    pub augmented: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

impl ManifestRecord {
    pub fn pixels(&self) -> u64 {
        u64::from(self.width) * u64::from(self.height)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMeta {
    pub seed: u64,
    pub ratios: [f64; 3],
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
    pub split_meta: Option<SplitMeta>,
    /// Directory that relative record paths resolve against.
    pub base_dir: PathBuf,
}

fn meta_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    path.with_file_name(name)
}

impl DatasetManifest {
    pub fn new(records: Vec<ManifestRecord>, base_dir: impl Into<PathBuf>) -> Self {
        Self {
            records,
            split_meta: None,
            base_dir: base_dir.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn subset(&self, split: Split) -> Vec<&ManifestRecord> {
        self.records.iter().filter(|r| r.split == Some(split)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        if let Some(meta) = &self.split_meta {
            std::fs::write(meta_path(path), serde_json::to_string_pretty(meta)?)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        let mut records = Vec::new();
        for line in BufReader::new(f).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line)?);
        }
        let mp = meta_path(path);
        let split_meta = if mp.exists() {
            Some(serde_json::from_str(&std::fs::read_to_string(mp)?)?)
        } else {
            None
        };
        Ok(Self {
            records,
            split_meta,
            base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        })
    }
}

/// Crack pixels over all pixels across the manifest.
pub fn crack_proportion(manifest: &DatasetManifest) -> Result<f64> {
    let total: u64 = manifest.records.iter().map(ManifestRecord::pixels).sum();
    if total == 0 {
        return Err(Error::Empty("manifest has no pixels".into()));
    }
    let crack: u64 = manifest.records.iter().map(|r| r.crack_pixels).sum();
    Ok(crack as f64 / total as f64)
}

pub fn validate_ratios(ratios: [f64; 3]) -> Result<()> {
    let sum: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| !(r.is_finite() && *r >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Config(format!("split ratios {ratios:?} must be >= 0 and sum to 1")));
    }
    Ok(())
}

/// Tile counts per split for `n` originals: val/test take the floor of their
/// share and train takes the remainder.
pub fn split_sizes(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let share = |r: f64| ((n as f64 * r) + 1e-9).floor() as usize;
    let val = share(ratios[1]).min(n);
    let test = share(ratios[2]).min(n - val);
    [n - val - test, val, test]
}

/// Seeded random split of the non-augmented records; every augmented record
/// follows its parent so no augmented copy crosses split boundaries.
pub fn split_manifest(manifest: &DatasetManifest, ratios: [f64; 3], seed: u64) -> Result<DatasetManifest> {
    validate_ratios(ratios)?;
    let mut originals: Vec<usize> = manifest
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| !r.augmented)
        .map(|(i, _)| i)
        .collect();
    if originals.is_empty() {
        return Err(Error::EmptySplit("manifest has no original tiles to split".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    originals.shuffle(&mut rng);
    let [n_train, n_val, _] = split_sizes(originals.len(), ratios);

    let mut out = manifest.clone();
    let mut by_id: HashMap<String, Split> = HashMap::new();
    for (pos, &i) in originals.iter().enumerate() {
        let split = if pos < n_train {
            Split::Train
        } else if pos < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        out.records[i].split = Some(split);
        by_id.insert(out.records[i].id.clone(), split);
    }
    for r in out.records.iter_mut().filter(|r| r.augmented) {
        let parent = r
            .parent
            .as_ref()
            .ok_or_else(|| Error::Config(format!("augmented record `{}` has no parent", r.id)))?;
        let split = by_id
            .get(parent)
            .ok_or_else(|| Error::Config(format!("parent `{parent}` of `{}` not in manifest", r.id)))?;
        r.split = Some(*split);
    }
    out.split_meta = Some(SplitMeta { seed, ratios });
    Ok(out)
}
