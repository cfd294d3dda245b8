//! Synthetic dataset splits, generated in parallel and stored as one
//! directory per scene.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::DataConfig;
use crate::error::{Error, Result};
use crate::synth::{generate_sample, sample_seed, SceneSample};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
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

    /// Global sample indices of this split.
    pub fn range(self, cfg: &DataConfig) -> std::ops::Range<usize> {
        match self {
            Split::Train => 0..cfg.train,
            Split::Val => cfg.train..cfg.train + cfg.val,
            Split::Test => cfg.train + cfg.val..cfg.train + cfg.val + cfg.test,
        }
    }
}

/// Generates one split. Each sample is seeded independently, so the result
/// does not depend on the number of threads.
pub fn generate_split(cfg: &DataConfig, split: Split) -> Result<Vec<SceneSample>> {
    cfg.synth.validate()?;
    split
        .range(cfg)
        .into_par_iter()
        .map(|k| generate_sample(sample_seed(cfg.seed, k as u64), &cfg.synth))
        .collect()
}

fn scene_dir(root: &Path, split: Split, k: usize) -> PathBuf {
    root.join(split.name()).join(format!("scene_{k:05}"))
}

pub fn save_split(root: impl AsRef<Path>, split: Split, samples: &[SceneSample]) -> Result<()> {
    let root = root.as_ref();
    samples
        .par_iter()
        .enumerate()
        .try_for_each(|(k, s)| s.save(scene_dir(root, split, k)))
}

/// Loads every `scene_*` directory of a split in name order.
pub fn load_split(root: impl AsRef<Path>, split: Split) -> Result<Vec<SceneSample>> {
    let dir = root.as_ref().join(split.name());
    let entries = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut dirs = Vec::new();
    for e in entries {
        let e = e.map_err(|err| Error::io(&dir, err))?;
        if e.file_name().to_string_lossy().starts_with("scene_") && e.path().is_dir() {
            dirs.push(e.path());
        }
    }
    dirs.sort();
    dirs.par_iter().map(SceneSample::load).collect()
}

/// Generates and writes all splits plus the data config.
pub fn write_dataset(root: impl AsRef<Path>, cfg: &DataConfig) -> Result<()> {
    let root = root.as_ref();
    for split in Split::ALL {
        save_split(root, split, &generate_split(cfg, split)?)?;
    }
    let path = root.join("data_config.json");
    let mut text = serde_json::to_string_pretty(cfg)?;
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DataConfig {
        DataConfig {
            train: 4,
            val: 2,
            test: 3,
            ..Default::default()
        }
    }

    #[test]
    fn splits_are_disjoint_and_reproducible() {
        let cfg = small();
        let a = generate_split(&cfg, Split::Val).unwrap();
        let b = generate_split(&cfg, Split::Val).unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!(a[0].image, b[0].image);
        let t = generate_split(&cfg, Split::Train).unwrap();
        assert_ne!(t[0].image, a[0].image);
        assert_eq!(Split::Test.range(&cfg), 6..9);
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        write_dataset(dir.path(), &cfg).unwrap();
        let back = load_split(dir.path(), Split::Test).unwrap();
        let orig = generate_split(&cfg, Split::Test).unwrap();
        assert_eq!(back.len(), 3);
        for (x, y) in back.iter().zip(&orig) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.labels, y.labels);
            assert_eq!(x.occlusion, y.occlusion);
            assert_eq!(x.depth, y.depth);
        }
    }
}
