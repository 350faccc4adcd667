//! Persisting a generated dataset as PNG files plus a manifest.
//!
//! Layout: `images/{id:06}.png`, `masks/{id:06}.png` (8-bit class ids) and
//! `manifest.csv` with `sample_id,image,mask` rows.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use ndarray::{Array2, Array3};

use super::SyntheticSample;
use crate::error::{DscError, Result};

pub const MANIFEST: &str = "manifest.csv";

pub fn image_to_rgb8(image: &Array3<f64>) -> RgbImage {
    let (h, w, _) = image.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (image[[y as usize, x as usize, c]].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    })
}

pub fn mask_to_gray8(mask: &Array2<u8>) -> GrayImage {
    let (h, w) = mask.dim();
    GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([mask[[y as usize, x as usize]]]))
}

pub fn gray8_to_mask(img: &GrayImage) -> Array2<u8> {
    let (w, h) = img.dimensions();
    Array2::from_shape_fn((h as usize, w as usize), |(y, x)| img.get_pixel(x as u32, y as u32)[0])
}

/// Writes every sample and returns the manifest path.
pub fn export_dataset(samples: &[SyntheticSample], dir: &Path) -> Result<PathBuf> {
    let images = dir.join("images");
    let masks = dir.join("masks");
    for d in [&images, &masks] {
        fs::create_dir_all(d).map_err(|e| DscError::io(d.clone(), 0, e))?;
    }
    let manifest_path = dir.join(MANIFEST);
    let mut manifest = fs::File::create(&manifest_path)
        .map_err(|e| DscError::io(manifest_path.clone(), 0, e))?;
    let mut body = String::from("sample_id,image,mask\n");
    for s in samples {
        let img_rel = format!("images/{:06}.png", s.sample_id);
        let mask_rel = format!("masks/{:06}.png", s.sample_id);
        image_to_rgb8(&s.image)
            .save(dir.join(&img_rel))
            .map_err(|e| DscError::Image(e.to_string()))?;
        mask_to_gray8(&s.mask)
            .save(dir.join(&mask_rel))
            .map_err(|e| DscError::Image(e.to_string()))?;
        body.push_str(&format!("{},{img_rel},{mask_rel}\n", s.sample_id));
    }
    manifest
        .write_all(body.as_bytes())
        .map_err(|e| DscError::io(manifest_path.clone(), 0, e))?;
    Ok(manifest_path)
}
