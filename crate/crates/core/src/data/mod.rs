//! Dataset ingestion, preprocessing, augmentation and a synthetic polyp
//! generator.
//!
//! A dataset directory holds `images/<id>.ppm` and `masks/<id>.pgm`,
//! matched by file stem.

mod augment;
mod pnm;
mod resize;
mod synth;

pub use augment::{augment, center_crop, cutmix, cutout, grid_distortion, hflip, rotate, vflip, AugmentConfig, Rect};
pub use pnm::{decode_pnm, encode_pnm, read_pnm, write_pnm, RawImage};
pub use resize::{resize_bilinear, resize_nearest};
pub use synth::{synth_polyp_dataset, synth_polyp_raw, write_raw_dataset};

use std::fs;
use std::path::Path;

use crate::engine::Tensor;
use crate::error::{Error, Result};

/// Mask bytes above this value are foreground.
pub const MASK_THRESHOLD: u8 = 127;

/// An image in `[-1, 1]` (`[H, W, 3]`) with its binary mask (`[H, W, 1]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Tensor<f32>,
    pub mask: Tensor<f32>,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[1]
    }
}

/// Maps an 8-bit intensity to `[-1, 1]`.
pub fn normalize(v: f64) -> f32 {
    (v / 127.5 - 1.0) as f32
}

/// Resizes an RGB image bilinearly to `target × target` and normalizes it
/// into a `[target, target, 3]` tensor.
pub fn image_tensor(id: &str, image: &RawImage, target: usize) -> Result<Tensor<f32>> {
    if target == 0 || !target.is_multiple_of(32) {
        return Err(Error::Config(format!("target size {target} must be a positive multiple of 32")));
    }
    if image.channels != 3 {
        return Err(Error::Format(format!("{id}: image must have 3 channels, has {}", image.channels)));
    }
    let img: Vec<f32> = resize_bilinear(image, target, target).into_iter().map(normalize).collect();
    Tensor::new(vec![target, target, 3], img)
}

/// Resizes an RGB image (bilinear) and its mask (nearest) to
/// `target × target`, normalizes the image and thresholds the mask.
pub fn preprocess(id: &str, image: &RawImage, mask: &RawImage, target: usize) -> Result<Sample> {
    let image = image_tensor(id, image, target)?;
    if mask.channels != 1 {
        return Err(Error::Format(format!("{id}: mask must have 1 channel, has {}", mask.channels)));
    }
    let m: Vec<f32> = resize_nearest(mask, target, target)
        .pixels
        .into_iter()
        .map(|v| if v > MASK_THRESHOLD { 1.0 } else { 0.0 })
        .collect();
    Ok(Sample {
        id: id.to_string(),
        image,
        mask: Tensor::new(vec![target, target, 1], m)?,
    })
}

/// Converts a `[H, W, 1]` map in `[0, 1]` to an 8-bit PGM grid.
pub fn probability_to_raw(p: &Tensor<f32>) -> Result<RawImage> {
    let s = p.shape();
    if s.len() != 3 || s[2] != 1 {
        return Err(Error::Dimension(format!("expected a [H,W,1] map, got {s:?}")));
    }
    let px = p.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    RawImage::new(s[1], s[0], 1, px)
}

/// Loads every `images/<id>.ppm` with its `masks/<id>.pgm`, sorted by id.
pub fn load_dataset(dir: &Path, target: usize) -> Result<Vec<Sample>> {
    let images = dir.join("images");
    let masks = dir.join("masks");
    let mut ids: Vec<String> = fs::read_dir(&images)
        .map_err(|e| Error::Usage(format!("cannot read {}: {e}", images.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
        .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .collect();
    ids.sort();
    ids.iter()
        .map(|id| {
            let mask_path = masks.join(format!("{id}.pgm"));
            if !mask_path.exists() {
                return Err(Error::Format(format!("image `{id}` has no mask at {}", mask_path.display())));
            }
            let image = read_pnm(&images.join(format!("{id}.ppm")))?;
            let mask = read_pnm(&mask_path)?;
            preprocess(id, &image, &mask, target)
        })
        .collect()
}
