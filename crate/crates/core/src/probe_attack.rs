//! Linear patch probe and single-step FGSM.
//!
//! The probe `g(z) = w.z + b` is fitted on frozen patch embeddings against
//! binary patch masks. Its mean BCE over the patches of one image is the
//! surrogate loss whose input gradient drives the attack
//! `x_adv = clamp(x + eps * sign(grad_x L), 0, 1)`. The probe plays no part
//! in scoring.

use serde::{Deserialize, Serialize};

use crate::encoder::{Image, PatchEmbeddings, PatchEncoder};
use crate::{Error, Result};

const PROB_CLAMP: f64 = 1e-12;

pub(crate) fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Binary pixel-level annotation, row-major, `true` = anomalous.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelMask {
    height: usize,
    width: usize,
    values: Vec<bool>,
}

impl PixelMask {
    pub fn new(height: usize, width: usize, values: Vec<bool>) -> Result<Self> {
        if values.len() != height * width || values.is_empty() {
            return Err(Error::DimensionMismatch(format!(
                "{height}x{width} mask with {} values",
                values.len()
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![false; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[bool] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.values[row * self.width + col]
    }

    pub fn any(&self) -> bool {
        self.values.iter().any(|&v| v)
    }
}

/// Per-patch binary labels on a patch grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchMask {
    grid_rows: usize,
    grid_cols: usize,
    labels: Vec<bool>,
}

impl PatchMask {
    pub fn new(grid_rows: usize, grid_cols: usize, labels: Vec<bool>) -> Result<Self> {
        if labels.len() != grid_rows * grid_cols || labels.is_empty() {
            return Err(Error::DimensionMismatch(format!(
                "{grid_rows}x{grid_cols} patch mask with {} labels",
                labels.len()
            )));
        }
        Ok(Self {
            grid_rows,
            grid_cols,
            labels,
        })
    }

    pub fn nominal(grid_rows: usize, grid_cols: usize) -> Self {
        Self {
            grid_rows,
            grid_cols,
            labels: vec![false; grid_rows * grid_cols],
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.grid_rows, self.grid_cols)
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn count_positive(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }
}

/// A patch is anomalous iff any of its pixels is.
pub fn derive_patch_mask(mask: &PixelMask, patch_size: usize) -> Result<PatchMask> {
    if patch_size == 0 || mask.height % patch_size != 0 || mask.width % patch_size != 0 {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} mask is not divisible by patch size {patch_size}",
            mask.height, mask.width
        )));
    }
    let (rows, cols) = (mask.height / patch_size, mask.width / patch_size);
    let mut labels = vec![false; rows * cols];
    for r in 0..mask.height {
        for c in 0..mask.width {
            if mask.get(r, c) {
                labels[(r / patch_size) * cols + c / patch_size] = true;
            }
        }
    }
    PatchMask::new(rows, cols, labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LinearProbe {
    pub fn zeros(dim: usize) -> Self {
        Self {
            weights: vec![0.0; dim],
            bias: 0.0,
        }
    }

    pub fn logit(&self, z: &[f64]) -> f64 {
        self.weights.iter().zip(z).map(|(w, x)| w * x).sum::<f64>() + self.bias
    }

    pub fn logits(&self, embeddings: &PatchEmbeddings) -> Vec<f64> {
        embeddings.rows().map(|z| self.logit(z)).collect()
    }
}

/// Full-batch gradient descent schedule for [`fit_probe`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub l2: f64,
    pub learning_rate: f64,
    pub max_iterations: usize,
    pub tolerance: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            l2: 1e-4,
            learning_rate: 0.1,
            max_iterations: 500,
            tolerance: 1e-6,
        }
    }
}

/// Fits the probe on pooled patches by minimising
/// `mean BCE + (l2 / 2) |w|^2` on standardised features, then folds the
/// standardisation back into `(w, b)`.
pub fn fit_probe(pool: &[(&PatchEmbeddings, &PatchMask)], config: &ProbeConfig) -> Result<LinearProbe> {
    let dim = pool
        .first()
        .map(|(e, _)| e.dim())
        .ok_or_else(|| Error::ClassImbalance("empty probe training pool".into()))?;
    let mut n = 0usize;
    let mut positives = 0usize;
    for (emb, mask) in pool {
        if emb.dim() != dim || emb.grid() != mask.grid() {
            return Err(Error::DimensionMismatch(format!(
                "probe pool entry {:?} x {} with mask {:?}, expected D = {dim}",
                emb.grid(),
                emb.dim(),
                mask.grid()
            )));
        }
        n += emb.n_patches();
        positives += mask.count_positive();
    }
    if positives == 0 || positives == n {
        return Err(Error::ClassImbalance(format!(
            "probe pool has {positives} anomalous patches out of {n}"
        )));
    }

    let nf = n as f64;
    let mut mean = vec![0.0; dim];
    for (emb, _) in pool {
        for row in emb.rows() {
            for (m, x) in mean.iter_mut().zip(row) {
                *m += x;
            }
        }
    }
    mean.iter_mut().for_each(|m| *m /= nf);
    let mut scale = vec![0.0; dim];
    for (emb, _) in pool {
        for row in emb.rows() {
            for ((s, x), m) in scale.iter_mut().zip(row).zip(&mean) {
                *s += (x - m) * (x - m);
            }
        }
    }
    for s in scale.iter_mut() {
        *s = (*s / nf).sqrt();
        if *s <= 1e-12 {
            *s = 1.0;
        }
    }

    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    let mut x_std = vec![0.0; dim];
    let mut grad_w = vec![0.0; dim];
    for _ in 0..config.max_iterations {
        grad_w.iter_mut().for_each(|g| *g = 0.0);
        let mut grad_b = 0.0;
        for (emb, mask) in pool {
            for (row, &label) in emb.rows().zip(mask.labels()) {
                for k in 0..dim {
                    x_std[k] = (row[k] - mean[k]) / scale[k];
                }
                let logit = w.iter().zip(&x_std).map(|(a, x)| a * x).sum::<f64>() + b;
                let residual = sigmoid(logit) - if label { 1.0 } else { 0.0 };
                for (g, x) in grad_w.iter_mut().zip(&x_std) {
                    *g += residual * x;
                }
                grad_b += residual;
            }
        }
        for (g, wk) in grad_w.iter_mut().zip(&w) {
            *g = *g / nf + config.l2 * wk;
        }
        grad_b /= nf;

        let grad_inf = grad_w.iter().fold(grad_b.abs(), |acc, g| acc.max(g.abs()));
        if grad_inf < config.tolerance {
            break;
        }
        for (wk, g) in w.iter_mut().zip(&grad_w) {
            *wk -= config.learning_rate * g;
        }
        b -= config.learning_rate * grad_b;
    }

    let weights: Vec<f64> = w.iter().zip(&scale).map(|(wk, s)| wk / s).collect();
    let bias = b - weights.iter().zip(&mean).map(|(wk, m)| wk * m).sum::<f64>();
    Ok(LinearProbe { weights, bias })
}

/// Mean BCE of the probe's patch logits against `mask`, with probabilities
/// clamped to `[1e-12, 1 - 1e-12]`.
pub fn probe_loss(probe: &LinearProbe, embeddings: &PatchEmbeddings, mask: &PatchMask) -> Result<f64> {
    check_shapes(probe, embeddings, mask)?;
    let total: f64 = embeddings
        .rows()
        .zip(mask.labels())
        .map(|(z, &label)| {
            let p = sigmoid(probe.logit(z)).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            if label {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(total / embeddings.n_patches() as f64)
}

fn check_shapes(probe: &LinearProbe, embeddings: &PatchEmbeddings, mask: &PatchMask) -> Result<()> {
    if probe.weights.len() != embeddings.dim() {
        return Err(Error::DimensionMismatch(format!(
            "probe D = {}, embeddings D = {}",
            probe.weights.len(),
            embeddings.dim()
        )));
    }
    if mask.grid() != embeddings.grid() {
        return Err(Error::DimensionMismatch(format!(
            "mask grid {:?}, embedding grid {:?}",
            mask.grid(),
            embeddings.grid()
        )));
    }
    Ok(())
}

/// Gradient of [`probe_loss`] `o encode` with respect to the pixels.
///
/// Each patch contributes the cotangent `(sigmoid(l_j) - m_j) w / N`, which is
/// pushed through the encoder's vector-Jacobian product.
pub fn loss_input_gradient(
    encoder: &dyn PatchEncoder,
    probe: &LinearProbe,
    image: &Image,
    mask: &PatchMask,
) -> Result<Vec<f64>> {
    if !encoder.is_differentiable() {
        return Err(Error::NotDifferentiable);
    }
    let embeddings = encoder.encode(image)?;
    check_shapes(probe, &embeddings, mask)?;
    let n = embeddings.n_patches() as f64;
    let d = embeddings.dim();
    let mut cotangents = vec![0.0; embeddings.n_patches() * d];
    for (j, (z, &label)) in embeddings.rows().zip(mask.labels()).enumerate() {
        let residual = (sigmoid(probe.logit(z)) - if label { 1.0 } else { 0.0 }) / n;
        for (c, w) in cotangents[j * d..(j + 1) * d].iter_mut().zip(&probe.weights) {
            *c = residual * w;
        }
    }
    encoder.input_gradient(image, &cotangents)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub clamp_low: f64,
    pub clamp_high: f64,
}

impl AttackConfig {
    pub fn new(epsilon: f64) -> Result<Self> {
        let config = Self {
            epsilon,
            clamp_low: 0.0,
            clamp_high: 1.0,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::InvalidArgument(format!(
                "epsilon must lie in [0, 1], got {}",
                self.epsilon
            )));
        }
        if !(self.clamp_low < self.clamp_high) {
            return Err(Error::InvalidArgument(format!(
                "clamp bounds [{}, {}] are empty",
                self.clamp_low, self.clamp_high
            )));
        }
        Ok(())
    }
}

/// Parses a budget written as a decimal or a fraction such as `8/255`.
pub fn parse_epsilon(text: &str) -> Result<f64> {
    let text = text.trim();
    let parse = |s: &str| {
        s.trim()
            .parse::<f64>()
            .map_err(|_| Error::InvalidArgument(format!("cannot parse epsilon `{text}`")))
    };
    let value = match text.split_once('/') {
        Some((num, den)) => {
            let den = parse(den)?;
            if den == 0.0 {
                return Err(Error::InvalidArgument("epsilon denominator is zero".into()));
            }
            parse(num)? / den
        }
        None => parse(text)?,
    };
    AttackConfig::new(value).map(|c| c.epsilon)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Applies one signed-gradient step of size `epsilon` to `image`.
pub fn fgsm_step(image: &Image, gradient: &[f64], config: &AttackConfig) -> Result<Image> {
    config.validate()?;
    if gradient.len() != image.pixels().len() {
        return Err(Error::DimensionMismatch(format!(
            "gradient has {} values, image has {}",
            gradient.len(),
            image.pixels().len()
        )));
    }
    let pixels = image
        .pixels()
        .iter()
        .zip(gradient)
        .map(|(x, g)| (x + config.epsilon * sign(*g)).clamp(config.clamp_low, config.clamp_high))
        .collect();
    Ok(Image::unbounded(image.height(), image.width(), pixels)?.with_id(image.id()))
}

/// Single-step L-infinity FGSM against the probe's BCE loss.
pub fn fgsm_attack(
    encoder: &dyn PatchEncoder,
    probe: &LinearProbe,
    image: &Image,
    mask: &PatchMask,
    config: &AttackConfig,
) -> Result<Image> {
    config.validate()?;
    if !encoder.is_differentiable() {
        return Err(Error::NotDifferentiable);
    }
    if !image.in_unit_range() {
        return Err(Error::InvalidArgument("image pixels must lie in [0, 1]".into()));
    }
    let gradient = loss_input_gradient(encoder, probe, image, mask)?;
    fgsm_step(image, &gradient, config)
}
