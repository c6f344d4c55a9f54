//! `PEB1` embedding store.
//!
//! Binary layout, all integers little-endian:
//!
//! ```text
//! magic "PEB1" | u32 version (1) | u32 record_count | u32 N | u32 D
//! per record: u16 id_len | id (UTF-8) | u8 label | u8 condition | N*D f32
//! ```
//!
//! `label` is 0 nominal / 1 anomalous, `condition` is 0 clean / 1 adversarial.
//! A JSON sidecar `<file>.meta.json` carries [`StoreMetadata`].

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Condition, Image, PatchEmbeddings, PatchEncoder};
use crate::{Error, Result};

pub const PEB_MAGIC: [u8; 4] = *b"PEB1";
pub const PEB_VERSION: u32 = 1;

const HEADER_LEN: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreMetadata {
    pub backbone: String,
    pub resolution: u32,
    pub patch_size: u32,
    /// Attack budget used for adversarial records, if any.
    #[serde(default)]
    pub epsilon: Option<f64>,
    #[serde(default)]
    pub export_seed: Option<u64>,
}

impl Default for StoreMetadata {
    fn default() -> Self {
        Self {
            backbone: "unknown".into(),
            resolution: 0,
            patch_size: 0,
            epsilon: None,
            export_seed: None,
        }
    }
}

impl StoreMetadata {
    /// Square patch grid implied by resolution and patch size, if both are set.
    fn implied_grid(&self) -> Option<usize> {
        (self.resolution > 0 && self.patch_size > 0 && self.resolution % self.patch_size == 0)
            .then(|| (self.resolution / self.patch_size) as usize)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoreRecord {
    pub id: String,
    pub anomalous: bool,
    pub condition: Condition,
    /// Row-major `N x D` values.
    pub values: Vec<f32>,
}

/// Precomputed patch embeddings keyed by `(image id, condition)`.
///
/// Every record shares the store's `(N, D)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    metadata: StoreMetadata,
    grid: (usize, usize),
    dim: usize,
    records: Vec<StoreRecord>,
    index: HashMap<(String, Condition), usize>,
}

impl EmbeddingStore {
    pub fn new(metadata: StoreMetadata, grid_rows: usize, grid_cols: usize, dim: usize) -> Result<Self> {
        if grid_rows * grid_cols == 0 || dim == 0 {
            return Err(Error::DimensionMismatch(format!(
                "store needs N >= 1 and D >= 1, got {grid_rows}x{grid_cols} grid and D = {dim}"
            )));
        }
        if let Some(g) = metadata.implied_grid() {
            if (g, g) != (grid_rows, grid_cols) {
                return Err(Error::DimensionMismatch(format!(
                    "resolution {} / patch {} implies a {g}x{g} grid, got {grid_rows}x{grid_cols}",
                    metadata.resolution, metadata.patch_size
                )));
            }
        }
        Ok(Self {
            metadata,
            grid: (grid_rows, grid_cols),
            dim,
            records: Vec::new(),
            index: HashMap::new(),
        })
    }

    pub fn metadata(&self) -> &StoreMetadata {
        &self.metadata
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn n_patches(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[StoreRecord] {
        &self.records
    }

    pub fn contains(&self, id: &str, condition: Condition) -> bool {
        self.index.contains_key(&(id.to_owned(), condition))
    }

    pub fn has_condition(&self, condition: Condition) -> bool {
        self.records.iter().any(|r| r.condition == condition)
    }

    pub fn insert(&mut self, record: StoreRecord) -> Result<()> {
        let expected = self.n_patches() * self.dim;
        if record.values.len() != expected {
            return Err(Error::DimensionMismatch(format!(
                "record `{}` has {} values, store expects N*D = {expected}",
                record.id,
                record.values.len()
            )));
        }
        if record.id.len() > usize::from(u16::MAX) {
            return Err(Error::InvalidArgument(format!(
                "id longer than {} bytes",
                u16::MAX
            )));
        }
        if record.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "record `{}` has non-finite values",
                record.id
            )));
        }
        let key = (record.id.clone(), record.condition);
        if self.index.contains_key(&key) {
            return Err(Error::InvalidArgument(format!(
                "duplicate record `{}` ({})",
                record.id, record.condition
            )));
        }
        self.index.insert(key, self.records.len());
        self.records.push(record);
        Ok(())
    }

    /// Inserts `f64` embeddings, narrowing them to `f32` storage.
    pub fn insert_embeddings(
        &mut self,
        id: impl Into<String>,
        anomalous: bool,
        condition: Condition,
        embeddings: &PatchEmbeddings,
    ) -> Result<()> {
        if embeddings.grid() != self.grid || embeddings.dim() != self.dim {
            return Err(Error::DimensionMismatch(format!(
                "embeddings are {:?} x {}, store is {:?} x {}",
                embeddings.grid(),
                embeddings.dim(),
                self.grid,
                self.dim
            )));
        }
        self.insert(StoreRecord {
            id: id.into(),
            anomalous,
            condition,
            values: embeddings.values().iter().map(|&v| v as f32).collect(),
        })
    }

    pub fn record(&self, id: &str, condition: Condition) -> Option<&StoreRecord> {
        self.index
            .get(&(id.to_owned(), condition))
            .map(|&i| &self.records[i])
    }

    pub fn get(&self, id: &str, condition: Condition) -> Result<PatchEmbeddings> {
        let record = self
            .record(id, condition)
            .ok_or_else(|| Error::UnknownId(format!("{id} ({condition})")))?;
        PatchEmbeddings::new(
            self.grid.0,
            self.grid.1,
            self.dim,
            record.values.iter().map(|&v| f64::from(v)).collect(),
        )
    }

    /// Appends every record of `other`. Shapes must agree.
    pub fn merge(&mut self, other: EmbeddingStore) -> Result<()> {
        if other.grid != self.grid || other.dim != self.dim {
            return Err(Error::DimensionMismatch(format!(
                "cannot merge a {:?} x {} store into a {:?} x {} store",
                other.grid, other.dim, self.grid, self.dim
            )));
        }
        if self.metadata.epsilon.is_none() {
            self.metadata.epsilon = other.metadata.epsilon;
        }
        for record in other.records {
            self.insert(record)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let n = self.n_patches();
        let to_u32 = |v: usize, what: &str| {
            u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} exceeds u32")))
        };
        let mut out = Vec::with_capacity(HEADER_LEN + self.records.len() * (n * self.dim * 4 + 32));
        out.extend_from_slice(&PEB_MAGIC);
        out.extend_from_slice(&PEB_VERSION.to_le_bytes());
        out.extend_from_slice(&to_u32(self.records.len(), "record count")?.to_le_bytes());
        out.extend_from_slice(&to_u32(n, "N")?.to_le_bytes());
        out.extend_from_slice(&to_u32(self.dim, "D")?.to_le_bytes());
        for r in &self.records {
            if r.values.len() != n * self.dim {
                return Err(Error::DimensionMismatch(format!(
                    "record `{}` does not match the store's N*D",
                    r.id
                )));
            }
            out.extend_from_slice(&(r.id.len() as u16).to_le_bytes());
            out.extend_from_slice(r.id.as_bytes());
            out.push(u8::from(r.anomalous));
            out.push(match r.condition {
                Condition::Clean => 0,
                Condition::Adversarial => 1,
            });
            for v in &r.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses a `PEB1` payload. Without metadata the grid is taken as square
    /// when `N` is a perfect square and `1 x N` otherwise.
    pub fn from_bytes(bytes: &[u8], metadata: Option<StoreMetadata>) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != PEB_MAGIC {
            return Err(Error::Format("bad magic, expected `PEB1`".into()));
        }
        let version = cur.u32()?;
        if version != PEB_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let count = cur.u32()? as usize;
        let n = cur.u32()? as usize;
        let dim = cur.u32()? as usize;
        if n == 0 || dim == 0 {
            return Err(Error::Format(format!("invalid shape N = {n}, D = {dim}")));
        }

        let metadata = metadata.unwrap_or_default();
        let grid = match metadata.implied_grid() {
            Some(g) if g * g == n => (g, g),
            Some(g) => {
                return Err(Error::Format(format!(
                    "inconsistent shape: metadata implies {g}x{g} patches, header says N = {n}"
                )))
            }
            None => {
                let g = (n as f64).sqrt().round() as usize;
                if g * g == n {
                    (g, g)
                } else {
                    (1, n)
                }
            }
        };
        let mut store = EmbeddingStore::new(metadata, grid.0, grid.1, dim)?;
        for _ in 0..count {
            let id_len = usize::from(cur.u16()?);
            let id = std::str::from_utf8(cur.take(id_len)?)
                .map_err(|e| Error::Format(format!("id is not UTF-8: {e}")))?
                .to_owned();
            let anomalous = match cur.u8()? {
                0 => false,
                1 => true,
                other => return Err(Error::Format(format!("invalid label byte {other}"))),
            };
            let condition = match cur.u8()? {
                0 => Condition::Clean,
                1 => Condition::Adversarial,
                other => return Err(Error::Format(format!("invalid condition byte {other}"))),
            };
            let raw = cur.take(n * dim * 4)?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            store
                .insert(StoreRecord {
                    id,
                    anomalous,
                    condition,
                    values,
                })
                .map_err(|e| Error::Format(e.to_string()))?;
        }
        if cur.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after {count} records",
                bytes.len() - cur.pos
            )));
        }
        Ok(store)
    }

    pub fn sidecar_path(path: &Path) -> PathBuf {
        let mut name = path.as_os_str().to_owned();
        name.push(".meta.json");
        PathBuf::from(name)
    }

    /// Writes the binary file and its `.meta.json` sidecar.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
        let sidecar = Self::sidecar_path(path);
        let json = serde_json::to_string_pretty(&self.metadata)?;
        std::fs::write(&sidecar, json).map_err(|e| Error::io(&sidecar, e))?;
        Ok(())
    }

    /// Reads a store and, when present, its sidecar.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let sidecar = Self::sidecar_path(path);
        let metadata = if sidecar.exists() {
            let text = std::fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
            Some(serde_json::from_str(&text)?)
        } else {
            None
        };
        Self::from_bytes(&bytes, metadata)
    }
}

/// Store-backed encoding looks images up by id (clean condition).
impl PatchEncoder for EmbeddingStore {
    fn patch_size(&self) -> usize {
        self.metadata.patch_size as usize
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, image: &Image) -> Result<PatchEmbeddings> {
        self.get(image.id(), Condition::Clean)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format(format!(
                "truncated payload: needed {len} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
