//! Flat TOML experiment configuration.
//!
//! ```toml
//! dataset = "synthetic"        # synthetic | mvtec | manifest
//! dataset_root = "data/mvtec"  # MVTec root or manifest file
//! categories = []              # empty selects every category
//! backend = "toy"              # toy | store
//! store_paths = []             # PEB1 files for the store backend
//! patch_size = 4
//! embedding_dim = 32
//! encoder_seed = 0
//! resolution = 32
//! shots = [1, 4]
//! seeds = [0, 1, 2]
//! epsilon = "8/255"            # fraction string or number
//! ece_bins = 10
//! split_fraction = 0.2
//! output_dir = "out"
//! synthetic_categories = 2     # synthetic_* keys only for dataset = "synthetic"
//! ```
//!
//! Relative paths are resolved against the directory of the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{SyntheticConfig, DEFAULT_RESOLUTION};
use crate::probe_attack::{parse_epsilon, AttackConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Synthetic,
    Mvtec,
    Manifest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Toy,
    Store,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Epsilon {
    Value(f64),
    Text(String),
}

impl Epsilon {
    pub fn value(&self) -> Result<f64> {
        match self {
            Epsilon::Value(v) => AttackConfig::new(*v).map(|c| c.epsilon),
            Epsilon::Text(t) => parse_epsilon(t),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetKind,
    pub dataset_root: Option<PathBuf>,
    pub categories: Vec<String>,
    pub backend: BackendKind,
    pub store_paths: Vec<PathBuf>,
    pub patch_size: usize,
    pub embedding_dim: usize,
    pub encoder_seed: u64,
    pub resolution: usize,
    pub shots: Vec<usize>,
    pub seeds: Vec<u64>,
    pub epsilon: Epsilon,
    pub ece_bins: usize,
    pub split_fraction: f64,
    pub output_dir: PathBuf,
    /// Entropy histogram bins over `[0, ln 2]`.
    pub entropy_bins: usize,
    pub synthetic_categories: usize,
    pub synthetic_size: usize,
    pub synthetic_train: usize,
    pub synthetic_test_good: usize,
    pub synthetic_test_defect: usize,
    pub synthetic_brightness: f64,
    pub synthetic_noise: f64,
    pub synthetic_defect_strength_min: f64,
    pub synthetic_defect_strength_max: f64,
    pub synthetic_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let synth = SyntheticConfig::default();
        Self {
            dataset: DatasetKind::Synthetic,
            dataset_root: None,
            categories: Vec::new(),
            backend: BackendKind::Toy,
            store_paths: Vec::new(),
            patch_size: 4,
            embedding_dim: 32,
            encoder_seed: 0,
            resolution: synth.size,
            shots: vec![1, 2, 4, 8, 16],
            seeds: vec![0, 1, 2],
            epsilon: Epsilon::Text("8/255".into()),
            ece_bins: 10,
            split_fraction: 0.2,
            output_dir: PathBuf::from("fsad-out"),
            entropy_bins: 20,
            synthetic_categories: synth.categories,
            synthetic_size: synth.size,
            synthetic_train: synth.train,
            synthetic_test_good: synth.test_good,
            synthetic_test_defect: synth.test_defect,
            synthetic_brightness: synth.brightness,
            synthetic_noise: synth.noise,
            synthetic_defect_strength_min: synth.defect_strength_min,
            synthetic_defect_strength_max: synth.defect_strength_max,
            synthetic_seed: synth.seed,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parses and validates a config file, resolving relative paths against
    /// its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        config.resolve_paths(base);
        config.validate()?;
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(root) = self.dataset_root.as_mut() {
            fix(root);
        }
        self.store_paths.iter_mut().for_each(fix);
        fix(&mut self.output_dir);
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn epsilon_value(&self) -> Result<f64> {
        self.epsilon.value().map_err(|e| Error::Config(e.to_string()))
    }

    pub fn synthetic(&self) -> SyntheticConfig {
        SyntheticConfig {
            categories: self.synthetic_categories,
            size: self.synthetic_size,
            train: self.synthetic_train,
            test_good: self.synthetic_test_good,
            test_defect: self.synthetic_test_defect,
            brightness: self.synthetic_brightness,
            noise: self.synthetic_noise,
            defect_strength_min: self.synthetic_defect_strength_min,
            defect_strength_max: self.synthetic_defect_strength_max,
            seed: self.synthetic_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if self.shots.is_empty() || self.shots.contains(&0) {
            return bad("shots must be a non-empty list of positive counts".into());
        }
        let unique = |n: usize, set: std::collections::BTreeSet<u64>| set.len() == n;
        if !unique(self.seeds.len(), self.seeds.iter().copied().collect())
            || !unique(self.shots.len(), self.shots.iter().map(|&k| k as u64).collect())
        {
            return bad("shots and seeds must not repeat".into());
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return bad(format!("split_fraction must lie in (0, 1), got {}", self.split_fraction));
        }
        if self.ece_bins == 0 || self.entropy_bins == 0 {
            return bad("ece_bins and entropy_bins must be positive".into());
        }
        self.epsilon_value()?;
        if self.dataset != DatasetKind::Synthetic && self.dataset_root.is_none() {
            return bad("dataset_root is required for mvtec and manifest datasets".into());
        }
        if self.dataset == DatasetKind::Synthetic {
            self.synthetic().validate()?;
            if self.resolution != self.synthetic_size {
                return bad(format!(
                    "resolution {} differs from synthetic_size {}",
                    self.resolution, self.synthetic_size
                ));
            }
        }
        match self.backend {
            BackendKind::Toy => {
                if self.patch_size == 0 || self.embedding_dim == 0 {
                    return bad("patch_size and embedding_dim must be positive".into());
                }
                if self.resolution % self.patch_size != 0 {
                    return bad(format!(
                        "resolution {} is not divisible by patch_size {}",
                        self.resolution, self.patch_size
                    ));
                }
            }
            BackendKind::Store => {
                if self.store_paths.is_empty() {
                    return bad("store backend needs at least one entry in store_paths".into());
                }
                if self.dataset == DatasetKind::Synthetic {
                    return bad("store backend needs an mvtec or manifest dataset".into());
                }
            }
        }
        Ok(())
    }
}

impl ExperimentConfig {
    /// A config for the full-size image pipeline with default resolution.
    pub fn mvtec(root: impl Into<PathBuf>) -> Self {
        Self {
            dataset: DatasetKind::Mvtec,
            dataset_root: Some(root.into()),
            patch_size: 14,
            resolution: DEFAULT_RESOLUTION,
            ..Self::default()
        }
    }
}
