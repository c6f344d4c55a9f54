//! CSV manifest with columns `id,image,label,mask,category,split`.
//!
//! `label` is 0 (nominal) or 1 (anomalous), `mask` may be empty. Relative
//! paths are resolved against the manifest's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{check_unique_ids, Sample, Split};
use crate::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    id: String,
    image: String,
    label: u8,
    mask: Option<String>,
    category: String,
    split: String,
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let path = PathBuf::from(p);
    if path.is_absolute() {
        path
    } else {
        base.join(path)
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new(""));
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let mut samples = Vec::new();
    for (line, row) in reader.deserialize::<Row>().enumerate() {
        let row = row?;
        let at = || format!("{} row {}", path.display(), line + 1);
        let label = match row.label {
            0 => false,
            1 => true,
            other => return Err(Error::Dataset(format!("{}: label {other} is not 0 or 1", at()))),
        };
        let split: Split = row.split.parse().map_err(|e| Error::Dataset(format!("{}: {e}", at())))?;
        let mask = row.mask.filter(|m| !m.trim().is_empty()).map(|m| resolve(base, &m));
        if label && split == Split::Test && mask.is_none() {
            return Err(Error::Dataset(format!("{}: anomalous sample `{}` has no mask", at(), row.id)));
        }
        samples.push(Sample {
            id: row.id,
            image: resolve(base, &row.image),
            label,
            mask,
            category: row.category,
            split,
        });
    }
    check_unique_ids(&samples)?;
    Ok(samples)
}

pub fn write_manifest(path: impl AsRef<Path>, samples: &[Sample]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = csv::Writer::from_writer(file);
    for s in samples {
        writer.serialize(Row {
            id: s.id.clone(),
            image: s.image.to_string_lossy().into_owned(),
            label: u8::from(s.label),
            mask: s.mask.as_ref().map(|m| m.to_string_lossy().into_owned()),
            category: s.category.clone(),
            split: s.split.as_str().to_string(),
        })?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}
