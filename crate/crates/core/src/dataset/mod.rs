//! Dataset ingestion, preprocessing and few-shot support sampling.
//!
//! Two on-disk sources are understood: the MVTec-AD directory layout and a
//! flat CSV manifest (`id,image,label,mask,category,split`). A procedural
//! generator provides small textured categories with exact defect masks.

mod manifest;
mod mvtec;
mod preprocess;
mod synthetic;

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::Image;
use crate::probe_attack::PixelMask;
use crate::rng::rng_for;
use crate::{Error, Result};

pub use manifest::{load_manifest, write_manifest};
pub use mvtec::{load_mvtec, load_mvtec_category};
pub use preprocess::{load_image, load_mask, preprocess_mask, preprocess_rgb, save_image, DEFAULT_RESOLUTION};
pub use synthetic::{generate_synthetic, write_mvtec_layout, SyntheticConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Dataset(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub image: PathBuf,
    /// `true` for anomalous samples.
    pub label: bool,
    pub mask: Option<PathBuf>,
    pub category: String,
    pub split: Split,
}

/// A sample together with its preprocessed pixels and pixel mask. Nominal
/// samples carry an all-false mask.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedSample {
    pub sample: Sample,
    pub image: Image,
    pub mask: PixelMask,
}

/// Decodes and preprocesses every sample, in parallel, preserving order.
pub fn load_samples(samples: &[Sample], resolution: usize) -> Result<Vec<LoadedSample>> {
    samples
        .par_iter()
        .map(|s| {
            let image = load_image(&s.image, resolution)?.with_id(s.id.clone());
            let mask = match &s.mask {
                Some(path) => load_mask(path, resolution)?,
                None => PixelMask::empty(image.height(), image.width()),
            };
            Ok(LoadedSample {
                sample: s.clone(),
                image,
                mask,
            })
        })
        .collect()
}

/// Groups samples by category, keeping their relative order.
pub fn by_category(samples: Vec<Sample>) -> BTreeMap<String, Vec<Sample>> {
    let mut out: BTreeMap<String, Vec<Sample>> = BTreeMap::new();
    for s in samples {
        out.entry(s.category.clone()).or_default().push(s);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct FewShotTask {
    pub category: String,
    pub k: usize,
    pub seed: u64,
    pub support: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Draws `k` nominal training samples of `category` uniformly without
/// replacement. The draw depends only on `(seed, category, k)`.
pub fn sample_support(samples: &[Sample], category: &str, k: usize, seed: u64) -> Result<FewShotTask> {
    if k == 0 {
        return Err(Error::InvalidArgument("shot count must be positive".into()));
    }
    let pool: Vec<&Sample> = samples
        .iter()
        .filter(|s| s.category == category && s.split == Split::Train && !s.label)
        .collect();
    if k > pool.len() {
        return Err(Error::Dataset(format!(
            "category `{category}` has {} nominal training images, {k} requested",
            pool.len()
        )));
    }
    let mut rng = rng_for(seed, &["support", category]);
    let mut picked = rand::seq::index::sample(&mut rng, pool.len(), k).into_vec();
    picked.sort_unstable();
    let support: Vec<Sample> = picked.into_iter().map(|i| pool[i].clone()).collect();
    let test: Vec<Sample> = samples
        .iter()
        .filter(|s| s.category == category && s.split == Split::Test)
        .cloned()
        .collect();
    let support_ids: BTreeSet<&str> = support.iter().map(|s| s.id.as_str()).collect();
    if let Some(dup) = test.iter().find(|s| support_ids.contains(s.id.as_str())) {
        return Err(Error::Dataset(format!("id `{}` is both support and test", dup.id)));
    }
    Ok(FewShotTask {
        category: category.to_string(),
        k,
        seed,
        support,
        test,
    })
}

fn check_unique_ids(samples: &[Sample]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for s in samples {
        if !seen.insert(s.id.as_str()) {
            return Err(Error::Dataset(format!("duplicate sample id `{}`", s.id)));
        }
    }
    Ok(())
}
