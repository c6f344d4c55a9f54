//! Smaller-edge resize followed by a centre crop.
//!
//! Images use bilinear interpolation with half-pixel centres; masks use
//! nearest-neighbour sampling on the same grid so both stay aligned.

use std::path::Path;

use crate::encoder::{Image, CHANNELS};
use crate::probe_attack::PixelMask;
use crate::{Error, Result};

pub const DEFAULT_RESOLUTION: usize = 448;

/// Size after resizing the smaller edge to `resolution`, and the crop offset.
fn geometry(height: usize, width: usize, resolution: usize) -> Result<((usize, usize), (usize, usize))> {
    if height == 0 || width == 0 || resolution == 0 {
        return Err(Error::InvalidArgument(format!(
            "cannot resize {height}x{width} to {resolution}"
        )));
    }
    let scale = resolution as f64 / height.min(width) as f64;
    let scaled = |edge: usize| {
        if edge == height.min(width) {
            resolution
        } else {
            ((edge as f64 * scale).round() as usize).max(resolution)
        }
    };
    let (h, w) = (scaled(height), scaled(width));
    Ok(((h, w), ((h - resolution) / 2, (w - resolution) / 2)))
}

/// Source coordinate and weight pairs for each output index along one axis.
fn bilinear_taps(input: usize, output: usize, offset: usize, count: usize) -> Vec<(usize, usize, f64)> {
    let ratio = input as f64 / output as f64;
    (offset..offset + count)
        .map(|o| {
            let src = ((o as f64 + 0.5) * ratio - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

fn nearest_taps(input: usize, output: usize, offset: usize, count: usize) -> Vec<usize> {
    let ratio = input as f64 / output as f64;
    (offset..offset + count)
        .map(|o| (((o as f64 + 0.5) * ratio).floor() as usize).min(input - 1))
        .collect()
}

/// Resizes and crops an HWC RGB buffer with values in `[0, 1]`.
pub fn preprocess_rgb(height: usize, width: usize, pixels: &[f64], resolution: usize) -> Result<Image> {
    if pixels.len() != height * width * CHANNELS {
        return Err(Error::DimensionMismatch(format!(
            "{height}x{width} RGB buffer with {} values",
            pixels.len()
        )));
    }
    let ((h, w), (top, left)) = geometry(height, width, resolution)?;
    let rows = bilinear_taps(height, h, top, resolution);
    let cols = bilinear_taps(width, w, left, resolution);
    let at = |r: usize, c: usize, ch: usize| pixels[(r * width + c) * CHANNELS + ch];
    let mut out = Vec::with_capacity(resolution * resolution * CHANNELS);
    for &(r0, r1, fy) in &rows {
        for &(c0, c1, fx) in &cols {
            for ch in 0..CHANNELS {
                let top_row = at(r0, c0, ch) * (1.0 - fx) + at(r0, c1, ch) * fx;
                let bottom_row = at(r1, c0, ch) * (1.0 - fx) + at(r1, c1, ch) * fx;
                out.push((top_row * (1.0 - fy) + bottom_row * fy).clamp(0.0, 1.0));
            }
        }
    }
    Image::new(resolution, resolution, out)
}

/// Resizes and crops a binary mask with nearest-neighbour sampling.
pub fn preprocess_mask(height: usize, width: usize, values: &[bool], resolution: usize) -> Result<PixelMask> {
    if values.len() != height * width {
        return Err(Error::DimensionMismatch(format!(
            "{height}x{width} mask with {} values",
            values.len()
        )));
    }
    let ((h, w), (top, left)) = geometry(height, width, resolution)?;
    let rows = nearest_taps(height, h, top, resolution);
    let cols = nearest_taps(width, w, left, resolution);
    let out = rows
        .iter()
        .flat_map(|&r| cols.iter().map(move |&c| values[r * width + c]))
        .collect();
    PixelMask::new(resolution, resolution, out)
}

fn decode(path: &Path) -> Result<image::DynamicImage> {
    image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

pub fn load_image(path: impl AsRef<Path>, resolution: usize) -> Result<Image> {
    let rgb = decode(path.as_ref())?.to_rgb32f();
    let (w, h) = rgb.dimensions();
    let pixels: Vec<f64> = rgb.into_raw().into_iter().map(f64::from).collect();
    preprocess_rgb(h as usize, w as usize, &pixels, resolution)
}

/// Loads a mask; any nonzero luma value is anomalous.
pub fn load_mask(path: impl AsRef<Path>, resolution: usize) -> Result<PixelMask> {
    let luma = decode(path.as_ref())?.to_luma8();
    let (w, h) = luma.dimensions();
    let values: Vec<bool> = luma.into_raw().into_iter().map(|v| v != 0).collect();
    preprocess_mask(h as usize, w as usize, &values, resolution)
}

pub(crate) fn save_png(path: &Path, buffer: image::DynamicImage) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    buffer.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes an image as a 16-bit RGB PNG.
pub fn save_image(image: &Image, path: impl AsRef<Path>) -> Result<()> {
    let values: Vec<u16> = image
        .pixels()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let buffer = image::ImageBuffer::<image::Rgb<u16>, _>::from_raw(image.width() as u32, image.height() as u32, values)
        .ok_or_else(|| Error::InvalidArgument("image buffer size".into()))?;
    save_png(path.as_ref(), buffer.into())
}
