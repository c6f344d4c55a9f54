//! Nominal patch memory bank and nearest-neighbor anomaly scoring.
//!
//! A query patch scores its exact minimum cosine distance to every bank row.
//! The image score is the mean of the top 1% patch scores, with at least one
//! patch always counted.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::encoder::PatchEmbeddings;
use crate::{Error, Result};

/// Rows with a Euclidean norm at or below this are rejected.
pub const MIN_NORM: f64 = 1e-12;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn distance_from_parts(dot: f64, norm_a: f64, norm_b: f64) -> f64 {
    (1.0 - dot / (norm_a * norm_b)).clamp(0.0, 2.0)
}

/// `1 - <x, y> / (|x| |y|)`, clamped to `[0, 2]` against rounding.
pub fn cosine_distance(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch(format!(
            "vectors of length {} and {}",
            x.len(),
            y.len()
        )));
    }
    let (nx, ny) = (norm(x), norm(y));
    if nx <= MIN_NORM || ny <= MIN_NORM {
        return Err(Error::DegenerateVector(format!("norms {nx:e} and {ny:e}")));
    }
    Ok(distance_from_parts(dot(x, y), nx, ny))
}

/// Support patch embeddings with cached row norms.
#[derive(Debug, Clone)]
pub struct MemoryBank {
    dim: usize,
    vectors: Vec<f64>,
    norms: Vec<f64>,
    row_source: Vec<u32>,
    sources: Vec<String>,
}

impl MemoryBank {
    /// Concatenates the support embeddings in order.
    pub fn build<'a, I>(support: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, &'a PatchEmbeddings)>,
    {
        let mut dim = None;
        let mut vectors = Vec::new();
        let mut norms = Vec::new();
        let mut row_source = Vec::new();
        let mut sources = Vec::new();
        for (id, emb) in support {
            match dim {
                None => dim = Some(emb.dim()),
                Some(d) if d != emb.dim() => {
                    return Err(Error::DimensionMismatch(format!(
                        "support `{id}` has D = {}, bank has D = {d}",
                        emb.dim()
                    )))
                }
                Some(_) => {}
            }
            let source = sources.len() as u32;
            sources.push(id.to_owned());
            for (j, row) in emb.rows().enumerate() {
                let n = norm(row);
                if n <= MIN_NORM {
                    return Err(Error::DegenerateVector(format!(
                        "support `{id}` patch {j} has norm {n:e}"
                    )));
                }
                vectors.extend_from_slice(row);
                norms.push(n);
                row_source.push(source);
            }
        }
        let dim = dim.ok_or(Error::EmptySupport)?;
        Ok(Self {
            dim,
            vectors,
            norms,
            row_source,
            sources,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.norms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.norms.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn norms(&self) -> &[f64] {
        &self.norms
    }

    /// Id of the support image that contributed row `i`.
    pub fn source_id(&self, i: usize) -> &str {
        &self.sources[self.row_source[i] as usize]
    }

    pub fn support_ids(&self) -> &[String] {
        &self.sources
    }

    /// Exact nearest-neighbor cosine distance of every query patch.
    pub fn patch_scores(&self, query: &PatchEmbeddings) -> Result<PatchScoreMap> {
        if query.dim() != self.dim {
            return Err(Error::DimensionMismatch(format!(
                "query D = {}, bank D = {}",
                query.dim(),
                self.dim
            )));
        }
        let scores = (0..query.n_patches())
            .into_par_iter()
            .map(|j| {
                let q = query.row(j);
                let nq = norm(q);
                if nq <= MIN_NORM {
                    return Err(Error::DegenerateVector(format!(
                        "query patch {j} has norm {nq:e}"
                    )));
                }
                let best = self
                    .vectors
                    .chunks_exact(self.dim)
                    .zip(&self.norms)
                    .map(|(row, &nb)| distance_from_parts(dot(q, row), nq, nb))
                    .fold(f64::INFINITY, f64::min);
                Ok(best)
            })
            .collect::<Result<Vec<f64>>>()?;
        let (rows, cols) = query.grid();
        PatchScoreMap::new(rows, cols, scores)
    }

    /// Patch scores followed by mean-top-1% aggregation.
    pub fn score_image(&self, query: &PatchEmbeddings) -> Result<f64> {
        Ok(self.patch_scores(query)?.aggregate_meantop1())
    }
}

/// Per-patch anomaly scores on the query's patch grid.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PatchScoreMap {
    grid_rows: usize,
    grid_cols: usize,
    scores: Vec<f64>,
}

impl PatchScoreMap {
    pub fn new(grid_rows: usize, grid_cols: usize, scores: Vec<f64>) -> Result<Self> {
        if scores.is_empty() || scores.len() != grid_rows * grid_cols {
            return Err(Error::DimensionMismatch(format!(
                "{grid_rows}x{grid_cols} grid with {} scores",
                scores.len()
            )));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidArgument("non-finite patch score".into()));
        }
        Ok(Self {
            grid_rows,
            grid_cols,
            scores,
        })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.grid_rows, self.grid_cols)
    }

    /// Mean of the `max(1, ceil(N / 100))` largest scores.
    pub fn aggregate_meantop1(&self) -> f64 {
        aggregate_meantop1(&self.scores)
    }

    /// Writes `patch_row,patch_col,score` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["patch_row", "patch_col", "score"])?;
        for (j, s) in self.scores.iter().enumerate() {
            w.write_record([
                (j / self.grid_cols).to_string(),
                (j % self.grid_cols).to_string(),
                s.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

/// Number of patches averaged by the top-1% rule.
pub fn top_count(n: usize) -> usize {
    n.div_ceil(100).max(1)
}

/// Mean of the top 1% of `scores` (at least one). Returns `NaN` when empty.
pub fn aggregate_meantop1(scores: &[f64]) -> f64 {
    if scores.is_empty() {
        return f64::NAN;
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let k = top_count(sorted.len());
    sorted[..k].iter().sum::<f64>() / k as f64
}
