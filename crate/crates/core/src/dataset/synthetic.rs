//! Procedural striped textures with square or stripe defects.
//!
//! Every category has a fixed base colour, stripe pattern and defect weave: a
//! tile of random colour offsets repeated every `WEAVE` pixels.
//! Images differ by pixel noise and, for anomalous ones, by the placement,
//! shape and strength of a single defect, whose mask is exact.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::preprocess::save_png;
use super::{LoadedSample, Sample, Split};
use crate::encoder::{Image, CHANNELS};
use crate::probe_attack::PixelMask;
use crate::rng::rng_for;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub categories: usize,
    pub size: usize,
    pub train: usize,
    pub test_good: usize,
    pub test_defect: usize,
    /// Mean base intensity of the textures.
    pub brightness: f64,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f64,
    pub defect_strength_min: f64,
    pub defect_strength_max: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            categories: 2,
            size: 32,
            train: 12,
            test_good: 60,
            test_defect: 60,
            brightness: 0.9,
            noise: 0.06,
            defect_strength_min: 0.279,
            defect_strength_max: 0.377,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.categories == 0 || self.train == 0 || self.test_good == 0 || self.test_defect == 0 {
            return bad("synthetic category and image counts must be positive".into());
        }
        if self.size < 8 {
            return bad(format!("synthetic image size {} is below 8", self.size));
        }
        if !(self.brightness > 0.0 && self.brightness < 1.0) {
            return bad(format!("synthetic brightness {} outside (0, 1)", self.brightness));
        }
        if !(self.noise >= 0.0) {
            return bad(format!("synthetic noise {} is negative", self.noise));
        }
        if !(0.0 < self.defect_strength_min && self.defect_strength_min <= self.defect_strength_max) {
            return bad("synthetic defect strengths must satisfy 0 < min <= max".into());
        }
        Ok(())
    }

    pub fn category_names(&self) -> Vec<String> {
        (0..self.categories).map(|i| format!("synthetic_{i:02}")).collect()
    }
}

const WEAVE: usize = 4;

struct Texture {
    base: [f64; CHANNELS],
    stripe: [f64; CHANNELS],
    period: usize,
    vertical: bool,
    weave: Vec<[f64; CHANNELS]>,
}

fn unit_colour<R: Rng>(rng: &mut R) -> [f64; CHANNELS] {
    loop {
        let v: [f64; CHANNELS] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.2 {
            return v.map(|x| x / norm);
        }
    }
}

impl Texture {
    fn for_category<R: Rng>(rng: &mut R, brightness: f64) -> Self {
        let base = std::array::from_fn(|_| brightness * rng.random_range(0.9..1.1));
        let amplitude = rng.random_range(0.05..0.12);
        let stripe = unit_colour(rng).map(|x| x * amplitude);
        Self {
            base,
            stripe,
            period: [4, 6, 8][rng.random_range(0..3)],
            vertical: rng.random_bool(0.5),
            weave: (0..WEAVE * WEAVE).map(|_| unit_colour(rng)).collect(),
        }
    }

    fn value(&self, row: usize, col: usize, ch: usize) -> f64 {
        let t = if self.vertical { col } else { row };
        let phase = (t % self.period) as f64 / self.period as f64;
        let wave = (2.0 * std::f64::consts::PI * phase).sin();
        self.base[ch] + self.stripe[ch] * wave
    }

    fn defect(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.weave[(row % WEAVE) * WEAVE + col % WEAVE][ch]
    }
}

#[derive(Debug, Clone, Copy)]
enum Defect {
    Square,
    Stripe,
}

impl Defect {
    fn name(self) -> &'static str {
        match self {
            Defect::Square => "square",
            Defect::Stripe => "stripe",
        }
    }
}

fn defect_mask<R: Rng>(rng: &mut R, kind: Defect, size: usize) -> Vec<bool> {
    let mut mask = vec![false; size * size];
    let (h, w) = match kind {
        Defect::Square => {
            let side = rng.random_range(size / 8..=size / 4).max(2);
            (side, side)
        }
        Defect::Stripe => {
            let len = rng.random_range(size / 3..=size / 2);
            let thick = rng.random_range(1..=2);
            if rng.random_bool(0.5) {
                (thick, len)
            } else {
                (len, thick)
            }
        }
    };
    let top = rng.random_range(0..=size - h);
    let left = rng.random_range(0..=size - w);
    for r in top..top + h {
        for c in left..left + w {
            mask[r * size + c] = true;
        }
    }
    mask
}

fn render<R: Rng>(
    rng: &mut R,
    texture: &Texture,
    cfg: &SyntheticConfig,
    defect: Option<(&[bool], f64)>,
) -> Result<Vec<f64>> {
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| Error::Config(e.to_string()))?;
    let n = cfg.size;
    let mut px = Vec::with_capacity(n * n * CHANNELS);
    for r in 0..n {
        for c in 0..n {
            let shifted = defect.filter(|(mask, _)| mask[r * n + c]).map(|(_, s)| s);
            for ch in 0..CHANNELS {
                let mut v = texture.value(r, c, ch) + noise.sample(rng);
                if let Some(strength) = shifted {
                    v += strength * texture.defect(r, c, ch);
                }
                px.push(v.clamp(0.0, 1.0));
            }
        }
    }
    Ok(px)
}

/// Generates every category, in name order; within a category: training
/// images, nominal test images, then anomalous test images.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Vec<LoadedSample>> {
    cfg.validate()?;
    let n = cfg.size;
    let mut out = Vec::new();
    for category in cfg.category_names() {
        let mut rng = rng_for(cfg.seed, &["synthetic", &category]);
        let texture = Texture::for_category(&mut rng, cfg.brightness);
        let mut push = |rng: &mut _, split: Split, folder: &str, i: usize, defect: Option<(Vec<bool>, f64)>| -> Result<()> {
            let id = format!("{category}/{}/{folder}/{i:03}", split.as_str());
            let pixels = render(rng, &texture, cfg, defect.as_ref().map(|(m, s)| (m.as_slice(), *s)))?;
            let mask = match &defect {
                Some((m, _)) => PixelMask::new(n, n, m.clone())?,
                None => PixelMask::empty(n, n),
            };
            out.push(LoadedSample {
                sample: Sample {
                    id: id.clone(),
                    image: PathBuf::from(format!("{category}/{}/{folder}/{i:03}.png", split.as_str())),
                    label: defect.is_some(),
                    mask: defect
                        .as_ref()
                        .map(|_| PathBuf::from(format!("{category}/ground_truth/{folder}/{i:03}_mask.png"))),
                    category: category.clone(),
                    split,
                },
                image: Image::new(n, n, pixels)?.with_id(id),
                mask,
            });
            Ok(())
        };
        for i in 0..cfg.train {
            push(&mut rng, Split::Train, "good", i, None)?;
        }
        for i in 0..cfg.test_good {
            push(&mut rng, Split::Test, "good", i, None)?;
        }
        for i in 0..cfg.test_defect {
            let kind = if i % 2 == 0 { Defect::Square } else { Defect::Stripe };
            let mask = defect_mask(&mut rng, kind, n);
            let strength = rng.random_range(cfg.defect_strength_min..=cfg.defect_strength_max);
            push(&mut rng, Split::Test, kind.name(), i, Some((mask, strength)))?;
        }
    }
    Ok(out)
}

/// Writes samples as 8-bit PNGs under `root` at their relative paths and
/// returns the samples with absolute paths.
pub fn write_mvtec_layout(root: impl AsRef<Path>, samples: &[LoadedSample]) -> Result<Vec<Sample>> {
    let root = root.as_ref();
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        let (h, w) = (s.image.height() as u32, s.image.width() as u32);
        let bytes: Vec<u8> = s.image.pixels().iter().map(|v| (v * 255.0).round() as u8).collect();
        let rgb = image::RgbImage::from_raw(w, h, bytes)
            .ok_or_else(|| Error::InvalidArgument("image buffer size".into()))?;
        let image_path = root.join(&s.sample.image);
        save_png(&image_path, rgb.into())?;
        let mask_path = match &s.sample.mask {
            Some(rel) => {
                let values: Vec<u8> = s.mask.values().iter().map(|&m| if m { 255 } else { 0 }).collect();
                let luma = image::GrayImage::from_raw(w, h, values)
                    .ok_or_else(|| Error::InvalidArgument("mask buffer size".into()))?;
                let path = root.join(rel);
                save_png(&path, luma.into())?;
                Some(path)
            }
            None => None,
        };
        out.push(Sample {
            image: image_path,
            mask: mask_path,
            ..s.sample.clone()
        });
    }
    Ok(out)
}
