use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Image, PatchEmbeddings, PatchEncoder, CHANNELS};
use crate::{Error, Result};

/// Bias-free linear patch encoder.
///
/// Each `p x p x 3` patch is flattened in `(row, col, channel)` order and
/// multiplied by a `(3 p^2) x D` projection drawn from a seeded standard
/// normal and scaled by `1 / sqrt(3 p^2)`. The input Jacobian is therefore
/// constant, which makes gradients exact.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyEncoder {
    patch_size: usize,
    dim: usize,
    seed: u64,
    projection: Vec<f64>,
}

impl ToyEncoder {
    pub fn new(patch_size: usize, dim: usize, seed: u64) -> Result<Self> {
        if patch_size == 0 || dim == 0 {
            return Err(Error::InvalidArgument(format!(
                "toy encoder needs patch_size >= 1 and dim >= 1, got {patch_size} and {dim}"
            )));
        }
        let fan_in = CHANNELS * patch_size * patch_size;
        let scale = 1.0 / (fan_in as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let projection = (0..fan_in * dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
            .collect();
        Ok(Self {
            patch_size,
            dim,
            seed,
            projection,
        })
    }

    /// Encoder with an explicit `(3 p^2) x D` row-major projection.
    pub fn from_projection(patch_size: usize, dim: usize, projection: Vec<f64>) -> Result<Self> {
        let fan_in = CHANNELS * patch_size * patch_size;
        if patch_size == 0 || dim == 0 || projection.len() != fan_in * dim {
            return Err(Error::DimensionMismatch(format!(
                "projection for patch size {patch_size} and dim {dim} needs {} values, got {}",
                fan_in * dim,
                projection.len()
            )));
        }
        if projection.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite projection entry".into()));
        }
        Ok(Self {
            patch_size,
            dim,
            seed: 0,
            projection,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Row-major `(3 p^2) x D` projection matrix.
    pub fn projection(&self) -> &[f64] {
        &self.projection
    }

    pub fn fan_in(&self) -> usize {
        CHANNELS * self.patch_size * self.patch_size
    }

    /// Calls `f(flat_index, pixel_index)` for every pixel of patch `(pr, pc)`.
    fn for_each_patch_pixel(
        &self,
        image: &Image,
        pr: usize,
        pc: usize,
        mut f: impl FnMut(usize, usize),
    ) {
        let p = self.patch_size;
        for dy in 0..p {
            for dx in 0..p {
                let base = image.index(pr * p + dy, pc * p + dx, 0);
                for c in 0..CHANNELS {
                    f((dy * p + dx) * CHANNELS + c, base + c);
                }
            }
        }
    }
}

impl PatchEncoder for ToyEncoder {
    fn patch_size(&self) -> usize {
        self.patch_size
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, image: &Image) -> Result<PatchEmbeddings> {
        let (rows, cols) = image.patch_grid(self.patch_size)?;
        let d = self.dim;
        let pixels = image.pixels();
        let mut values = vec![0.0; rows * cols * d];
        for pr in 0..rows {
            for pc in 0..cols {
                let out = &mut values[(pr * cols + pc) * d..(pr * cols + pc + 1) * d];
                self.for_each_patch_pixel(image, pr, pc, |flat, idx| {
                    let x = pixels[idx];
                    let w = &self.projection[flat * d..(flat + 1) * d];
                    for (o, wk) in out.iter_mut().zip(w) {
                        *o += x * wk;
                    }
                });
            }
        }
        PatchEmbeddings::new(rows, cols, d, values)
    }

    fn is_differentiable(&self) -> bool {
        true
    }

    fn input_gradient(&self, image: &Image, cotangents: &[f64]) -> Result<Vec<f64>> {
        let (rows, cols) = image.patch_grid(self.patch_size)?;
        let d = self.dim;
        if cotangents.len() != rows * cols * d {
            return Err(Error::DimensionMismatch(format!(
                "cotangents must be {}x{d}, got {} values",
                rows * cols,
                cotangents.len()
            )));
        }
        let mut grad = vec![0.0; image.pixels().len()];
        for pr in 0..rows {
            for pc in 0..cols {
                let j = pr * cols + pc;
                let cot = &cotangents[j * d..(j + 1) * d];
                self.for_each_patch_pixel(image, pr, pc, |flat, idx| {
                    let w = &self.projection[flat * d..(flat + 1) * d];
                    grad[idx] = w.iter().zip(cot).map(|(a, b)| a * b).sum();
                });
            }
        }
        Ok(grad)
    }
}
