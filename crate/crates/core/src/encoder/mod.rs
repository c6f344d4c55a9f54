//! Patch encoders: `image -> N x D` patch embeddings.
//!
//! Two backends are provided. [`ToyEncoder`] is a bias-free random linear
//! projection of each flattened patch and exposes exact input gradients.
//! [`EmbeddingStore`] serves precomputed embeddings by image id and refuses
//! gradient requests.

mod store;
mod toy;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use store::{EmbeddingStore, StoreMetadata, StoreRecord, PEB_MAGIC, PEB_VERSION};
pub use toy::ToyEncoder;

/// Number of colour channels of an [`Image`].
pub const CHANNELS: usize = 3;

/// Whether a sample was perturbed by an attack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Clean,
    Adversarial,
}

impl Condition {
    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Clean => "clean",
            Condition::Adversarial => "adversarial",
        }
    }
}

impl std::fmt::Display for Condition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clean" => Ok(Condition::Clean),
            "adversarial" => Ok(Condition::Adversarial),
            other => Err(Error::InvalidArgument(format!("unknown condition `{other}`"))),
        }
    }
}

/// RGB image with `f64` pixels stored row-major as `[row][col][channel]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    id: String,
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl Image {
    /// Builds an image whose pixels must all lie in `[0, 1]`.
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        let image = Self::unbounded(height, width, pixels)?;
        if let Some(v) = image.pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!(
                "pixel value {v} outside [0, 1]"
            )));
        }
        Ok(image)
    }

    /// Builds an image without the `[0, 1]` range check. Pixels must still be
    /// finite. Used for linearity and gradient checks.
    pub fn unbounded(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::DimensionMismatch(format!(
                "image must be non-empty, got {height}x{width}"
            )));
        }
        if pixels.len() != height * width * CHANNELS {
            return Err(Error::DimensionMismatch(format!(
                "{height}x{width}x{CHANNELS} image needs {} values, got {}",
                height * width * CHANNELS,
                pixels.len()
            )));
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite pixel value".into()));
        }
        Ok(Self {
            id: String::new(),
            height,
            width,
            pixels,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            id: String::new(),
            height,
            width,
            pixels: vec![0.0; height * width * CHANNELS],
        }
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, channel: usize) -> usize {
        (row * self.width + col) * CHANNELS + channel
    }

    pub fn get(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.pixels[self.index(row, col, channel)]
    }

    pub fn in_unit_range(&self) -> bool {
        self.pixels.iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// Patch grid `(rows, cols)` for patch size `p`, or an error if the image
    /// is not tiled exactly.
    pub fn patch_grid(&self, patch_size: usize) -> Result<(usize, usize)> {
        if patch_size == 0 || self.height % patch_size != 0 || self.width % patch_size != 0 {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} image is not divisible by patch size {patch_size}",
                self.height, self.width
            )));
        }
        Ok((self.height / patch_size, self.width / patch_size))
    }
}

/// `N x D` patch embeddings of one image laid out on a `grid_rows x grid_cols`
/// patch grid (row-major, `N = grid_rows * grid_cols`).
#[derive(Debug, Clone, PartialEq)]
pub struct PatchEmbeddings {
    grid_rows: usize,
    grid_cols: usize,
    dim: usize,
    values: Vec<f64>,
}

impl PatchEmbeddings {
    pub fn new(grid_rows: usize, grid_cols: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        let n = grid_rows * grid_cols;
        if n == 0 || dim == 0 {
            return Err(Error::DimensionMismatch(format!(
                "empty embedding matrix ({grid_rows}x{grid_cols} grid, dim {dim})"
            )));
        }
        if values.len() != n * dim {
            return Err(Error::DimensionMismatch(format!(
                "{n} patches x {dim} dims needs {} values, got {}",
                n * dim,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite embedding value".into()));
        }
        Ok(Self {
            grid_rows,
            grid_cols,
            dim,
            values,
        })
    }

    pub fn n_patches(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.grid_rows, self.grid_cols)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.values[j * self.dim..(j + 1) * self.dim]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.values.chunks_exact(self.dim)
    }
}

/// An image-to-patch-embedding map.
///
/// Implementations are immutable after construction and safe to share across
/// threads.
pub trait PatchEncoder: Send + Sync {
    fn patch_size(&self) -> usize;

    fn dim(&self) -> usize;

    fn encode(&self, image: &Image) -> Result<PatchEmbeddings>;

    fn is_differentiable(&self) -> bool {
        false
    }

    /// Vector-Jacobian product `d<cotangents, encode(x)>/dx`, laid out like
    /// `image.pixels()`. `cotangents` is an `N x D` row-major matrix.
    fn input_gradient(&self, _image: &Image, _cotangents: &[f64]) -> Result<Vec<f64>> {
        Err(Error::NotDifferentiable)
    }
}
