//! MVTec-AD layout:
//!
//! ```text
//! <root>/<category>/train/good/*
//! <root>/<category>/test/<defect>/*
//! <root>/<category>/ground_truth/<defect>/<stem>_mask.png
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::{check_unique_ids, Sample, Split};
use crate::{Error, Result};

const IMAGE_EXTENSIONS: [&str; 6] = ["png", "jpg", "jpeg", "ppm", "pgm", "pnm"];

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(entry.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    Ok(sorted_entries(dir)?
        .into_iter()
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect())
}

fn subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    Ok(sorted_entries(dir)?.into_iter().filter(|p| p.is_dir()).collect())
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn require_dir(path: &Path) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Error::Dataset(format!("missing directory {}", path.display())))
    }
}

pub fn load_mvtec_category(root: impl AsRef<Path>, category: &str) -> Result<Vec<Sample>> {
    let base = root.as_ref().join(category);
    let train_dir = base.join("train").join("good");
    let test_dir = base.join("test");
    require_dir(&train_dir)?;
    require_dir(&test_dir)?;

    let mut samples = Vec::new();
    for path in image_files(&train_dir)? {
        samples.push(Sample {
            id: format!("{category}/train/good/{}", stem(&path)),
            image: path,
            label: false,
            mask: None,
            category: category.to_string(),
            split: Split::Train,
        });
    }
    for defect_dir in subdirs(&test_dir)? {
        let defect = file_name(&defect_dir);
        let anomalous = defect != "good";
        for path in image_files(&defect_dir)? {
            let s = stem(&path);
            let mask = if anomalous {
                let mask = base.join("ground_truth").join(&defect).join(format!("{s}_mask.png"));
                if !mask.is_file() {
                    return Err(Error::Dataset(format!(
                        "anomalous image {} has no mask at {}",
                        path.display(),
                        mask.display()
                    )));
                }
                Some(mask)
            } else {
                None
            };
            samples.push(Sample {
                id: format!("{category}/test/{defect}/{s}"),
                image: path,
                label: anomalous,
                mask,
                category: category.to_string(),
                split: Split::Test,
            });
        }
    }
    check_unique_ids(&samples)?;
    Ok(samples)
}

/// Loads every category directory under `root` that has `train` and `test`
/// subdirectories.
pub fn load_mvtec(root: impl AsRef<Path>) -> Result<BTreeMap<String, Vec<Sample>>> {
    let root = root.as_ref();
    require_dir(root)?;
    let mut out = BTreeMap::new();
    for dir in subdirs(root)? {
        if dir.join("train").is_dir() && dir.join("test").is_dir() {
            let category = file_name(&dir);
            out.insert(category.clone(), load_mvtec_category(root, &category)?);
        }
    }
    if out.is_empty() {
        return Err(Error::Dataset(format!("no categories found under {}", root.display())));
    }
    Ok(out)
}
