//! Two-view augmentation: random resized crop, horizontal flip, color jitter,
//! random grayscale and Gaussian blur.
//!
//! Sampling and application are split. [`sample_record`] draws every random
//! parameter into an [`AugmentRecord`]; [`apply_record`] is a pure function of
//! the image and the record, so replaying a record reproduces the view exactly.

use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::color::{hsv_to_rgb, luma, rgb_to_hsv};
use super::SyntheticSample;
use crate::error::{DscError, Result};

const RATIO_RANGE: (f64, f64) = (3.0 / 4.0, 4.0 / 3.0);
const BLUR_SIGMA_RANGE: (f64, f64) = (0.1, 2.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Fraction of the image area covered by the crop.
    pub crop_scale_range: (f64, f64),
    pub output_size: usize,
    pub flip_prob: f64,
    pub grayscale_prob: f64,
    pub jitter_prob: f64,
    pub jitter_strength: f64,
    pub blur_prob: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_scale_range: (0.2, 1.0),
            output_size: 64,
            flip_prob: 0.5,
            grayscale_prob: 0.2,
            jitter_prob: 0.8,
            jitter_strength: 0.4,
            blur_prob: 0.5,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// Full-image crop with every photometric transform disabled.
    pub fn identity(output_size: usize) -> Self {
        Self {
            crop_scale_range: (1.0, 1.0),
            output_size,
            flip_prob: 0.0,
            grayscale_prob: 0.0,
            jitter_prob: 0.0,
            jitter_strength: 0.0,
            blur_prob: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_scale_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(DscError::Config(format!(
                "crop_scale_range must satisfy 0 < min <= max <= 1, got ({lo}, {hi})"
            )));
        }
        for (name, p) in [
            ("flip_prob", self.flip_prob),
            ("grayscale_prob", self.grayscale_prob),
            ("jitter_prob", self.jitter_prob),
            ("blur_prob", self.blur_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(DscError::Config(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        if !(0.0..=1.0).contains(&self.jitter_strength) {
            return Err(DscError::Config(format!(
                "jitter_strength must be in [0, 1], got {}",
                self.jitter_strength
            )));
        }
        if self.output_size == 0 {
            return Err(DscError::Config("output_size must be positive".into()));
        }
        Ok(())
    }
}

/// Half-open crop rectangle in source pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRect {
    pub y0: usize,
    pub x0: usize,
    pub h: usize,
    pub w: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JitterParams {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentRecord {
    pub crop: CropRect,
    pub output_size: usize,
    pub flip: bool,
    pub jitter: Option<JitterParams>,
    pub grayscale: bool,
    pub blur_sigma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewPair {
    pub view_a: Array3<f64>,
    pub view_b: Array3<f64>,
    pub record_a: AugmentRecord,
    pub record_b: AugmentRecord,
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}

fn coin(rng: &mut impl Rng, p: f64) -> bool {
    // Always consume one draw so the stream layout does not depend on `p`.
    rng.gen::<f64>() < p
}

fn sample_crop(height: usize, width: usize, scale: (f64, f64), rng: &mut impl Rng) -> CropRect {
    let area = (height * width) as f64;
    let (log_lo, log_hi) = (RATIO_RANGE.0.ln(), RATIO_RANGE.1.ln());
    for _ in 0..10 {
        let target = area * uniform(rng, scale.0, scale.1);
        let ratio = uniform(rng, log_lo, log_hi).exp();
        let w = (target * ratio).sqrt().round() as usize;
        let h = (target / ratio).sqrt().round() as usize;
        if w > 0 && h > 0 && w <= width && h <= height {
            let y0 = rng.gen_range(0..=height - h);
            let x0 = rng.gen_range(0..=width - w);
            return CropRect { y0, x0, h, w };
        }
    }
    // Fallback: central crop at the clamped aspect ratio.
    let in_ratio = width as f64 / height as f64;
    let (h, w) = if in_ratio < RATIO_RANGE.0 {
        ((width as f64 / RATIO_RANGE.0).round() as usize, width)
    } else if in_ratio > RATIO_RANGE.1 {
        (height, (height as f64 * RATIO_RANGE.1).round() as usize)
    } else {
        (height, width)
    };
    CropRect {
        y0: (height - h) / 2,
        x0: (width - w) / 2,
        h,
        w,
    }
}

/// Draws one set of augmentation parameters for an image of the given size.
pub fn sample_record(
    height: usize,
    width: usize,
    config: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<AugmentRecord> {
    config.validate()?;
    let min_side = (config.crop_scale_range.0 * (height * width) as f64 * RATIO_RANGE.0).sqrt();
    if height == 0 || width == 0 || min_side < 1.0 {
        return Err(DscError::Config(format!(
            "a {height}x{width} image cannot hold the minimum crop \
             (scale {})",
            config.crop_scale_range.0
        )));
    }
    let crop = sample_crop(height, width, config.crop_scale_range, rng);
    let flip = coin(rng, config.flip_prob);
    let s = config.jitter_strength;
    let apply_jitter = coin(rng, config.jitter_prob);
    let jitter_draw = JitterParams {
        brightness: uniform(rng, 1.0 - s, 1.0 + s),
        contrast: uniform(rng, 1.0 - s, 1.0 + s),
        saturation: uniform(rng, 1.0 - s, 1.0 + s),
        hue: uniform(rng, -s / 2.0, s / 2.0),
    };
    let grayscale = coin(rng, config.grayscale_prob);
    let apply_blur = coin(rng, config.blur_prob);
    let sigma = uniform(rng, BLUR_SIGMA_RANGE.0, BLUR_SIGMA_RANGE.1);
    Ok(AugmentRecord {
        crop,
        output_size: config.output_size,
        flip,
        jitter: apply_jitter.then_some(jitter_draw),
        grayscale,
        blur_sigma: apply_blur.then_some(sigma),
    })
}

/// Source coordinate sampled by output index `o` for a crop `[start, start + len)`.
fn source_coord(o: usize, start: usize, len: usize, out: usize) -> f64 {
    let s = start as f64 + (o as f64 + 0.5) * len as f64 / out as f64 - 0.5;
    s.clamp(start as f64, (start + len - 1) as f64)
}

fn resize_crop(image: &Array3<f64>, crop: CropRect, out: usize) -> Array3<f64> {
    let channels = image.dim().2;
    let mut result = Array3::<f64>::zeros((out, out, channels));
    let last_y = crop.y0 + crop.h - 1;
    let last_x = crop.x0 + crop.w - 1;
    for oy in 0..out {
        let sy = source_coord(oy, crop.y0, crop.h, out);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(last_y);
        let fy = sy - y0 as f64;
        for ox in 0..out {
            let sx = source_coord(ox, crop.x0, crop.w, out);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(last_x);
            let fx = sx - x0 as f64;
            for c in 0..channels {
                let top = image[[y0, x0, c]] + (image[[y0, x1, c]] - image[[y0, x0, c]]) * fx;
                let bottom = image[[y1, x0, c]] + (image[[y1, x1, c]] - image[[y1, x0, c]]) * fx;
                result[[oy, ox, c]] = top + (bottom - top) * fy;
            }
        }
    }
    result
}

fn apply_jitter(img: &mut Array3<f64>, j: &JitterParams) {
    img.mapv_inplace(|v| (v * j.brightness).clamp(0.0, 1.0));

    let (h, w, _) = img.dim();
    let mut mean = 0.0;
    for y in 0..h {
        for x in 0..w {
            mean += luma([img[[y, x, 0]], img[[y, x, 1]], img[[y, x, 2]]]);
        }
    }
    mean /= (h * w) as f64;
    img.mapv_inplace(|v| ((v - mean) * j.contrast + mean).clamp(0.0, 1.0));

    for y in 0..h {
        for x in 0..w {
            let rgb = [img[[y, x, 0]], img[[y, x, 1]], img[[y, x, 2]]];
            let g = luma(rgb);
            let sat: Vec<f64> = rgb
                .iter()
                .map(|&v| ((v - g) * j.saturation + g).clamp(0.0, 1.0))
                .collect();
            let (hue, s, v) = rgb_to_hsv([sat[0], sat[1], sat[2]]);
            let out = hsv_to_rgb(hue + j.hue, s, v);
            for c in 0..3 {
                img[[y, x, c]] = out[c].clamp(0.0, 1.0);
            }
        }
    }
}

fn apply_grayscale(img: &mut Array3<f64>) {
    let (h, w, _) = img.dim();
    for y in 0..h {
        for x in 0..w {
            let g = luma([img[[y, x, 0]], img[[y, x, 1]], img[[y, x, 2]]]);
            for c in 0..3 {
                img[[y, x, c]] = g;
            }
        }
    }
}

/// Normalized 1-D Gaussian with radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable blur with edge clamping.
fn apply_blur(img: &mut Array3<f64>, sigma: f64) {
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as i64;
    let (h, w, ch) = img.dim();
    let mut tmp = Array3::<f64>::zeros((h, w, ch));
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut acc = 0.0;
                for (k, &wt) in kernel.iter().enumerate() {
                    let sx = (x as i64 + k as i64 - radius).clamp(0, w as i64 - 1) as usize;
                    acc += wt * img[[y, sx, c]];
                }
                tmp[[y, x, c]] = acc;
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut acc = 0.0;
                for (k, &wt) in kernel.iter().enumerate() {
                    let sy = (y as i64 + k as i64 - radius).clamp(0, h as i64 - 1) as usize;
                    acc += wt * tmp[[sy, x, c]];
                }
                img[[y, x, c]] = acc;
            }
        }
    }
}

/// Replays a record on an image. Pure.
pub fn apply_record(image: &Array3<f64>, record: &AugmentRecord) -> Array3<f64> {
    let mut view = resize_crop(image, record.crop, record.output_size);
    if record.flip {
        view.invert_axis(ndarray::Axis(1));
        view = view.as_standard_layout().to_owned();
    }
    if let Some(j) = &record.jitter {
        apply_jitter(&mut view, j);
    }
    if record.grayscale {
        apply_grayscale(&mut view);
    }
    if let Some(sigma) = record.blur_sigma {
        apply_blur(&mut view, sigma);
    }
    view
}

/// Nearest-neighbor warp of a mask through the geometric part of a record.
/// Photometric fields are ignored.
pub fn warp_mask(mask: &Array2<u8>, record: &AugmentRecord) -> Array2<u8> {
    let out = record.output_size;
    let crop = record.crop;
    let pick = |o: usize, start: usize, len: usize| -> usize {
        let s = ((o as f64 + 0.5) * len as f64 / out as f64).floor() as usize;
        start + s.min(len - 1)
    };
    let mut result = Array2::<u8>::zeros((out, out));
    for oy in 0..out {
        let sy = pick(oy, crop.y0, crop.h);
        for ox in 0..out {
            let sx = pick(ox, crop.x0, crop.w);
            result[[oy, ox]] = mask[[sy, sx]];
        }
    }
    if record.flip {
        result.invert_axis(ndarray::Axis(1));
        result = result.as_standard_layout().to_owned();
    }
    result
}

/// Two independent draws of the augmentation set applied to one sample.
pub fn two_views(
    sample: &SyntheticSample,
    config: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<ViewPair> {
    let (h, w) = sample.size();
    let record_a = sample_record(h, w, config, rng)?;
    let record_b = sample_record(h, w, config, rng)?;
    Ok(ViewPair {
        view_a: apply_record(&sample.image, &record_a),
        view_b: apply_record(&sample.image, &record_b),
        record_a,
        record_b,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use crate::synthdata::generate_sample;

    fn sample() -> SyntheticSample {
        generate_sample(3, 4, 64, 9).unwrap()
    }

    #[test]
    fn identity_augmentation_reproduces_image() {
        let s = sample();
        let cfg = AugmentConfig::identity(64);
        let mut rng = stream_rng(1, 0, 0);
        let pair = two_views(&s, &cfg, &mut rng).unwrap();
        assert_eq!(pair.view_a, s.image);
        assert_eq!(pair.view_b, s.image);
        assert_eq!(warp_mask(&s.mask, &pair.record_a), s.mask);
    }

    #[test]
    fn forced_flip_mirrors_and_flipping_twice_restores() {
        let s = sample();
        let cfg = AugmentConfig {
            flip_prob: 1.0,
            ..AugmentConfig::identity(64)
        };
        let mut rng = stream_rng(2, 0, 0);
        let pair = two_views(&s, &cfg, &mut rng).unwrap();
        assert!(pair.record_a.flip);
        let (h, w, _) = s.image.dim();
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    assert_eq!(pair.view_a[[y, x, c]], s.image[[y, w - 1 - x, c]]);
                }
            }
        }
        let twice = apply_record(&pair.view_a, &pair.record_a);
        assert_eq!(twice, s.image);
    }

    #[test]
    fn default_config_is_deterministic_and_replayable() {
        let s = sample();
        let cfg = AugmentConfig::default();
        let a = two_views(&s, &cfg, &mut stream_rng(5, 3, 1)).unwrap();
        let b = two_views(&s, &cfg, &mut stream_rng(5, 3, 1)).unwrap();
        assert_eq!(a, b);
        assert_eq!(apply_record(&s.image, &a.record_a), a.view_a);
        assert_eq!(apply_record(&s.image, &a.record_b), a.view_b);
        assert_eq!(a.view_a.dim(), (64, 64, 3));
        assert!(a.view_a.iter().all(|v| v.is_finite() && (-1e-12..=1.0 + 1e-12).contains(v)));
    }

    #[test]
    fn cropped_mask_matches_source_restricted_to_crop() {
        let s = sample();
        let record = AugmentRecord {
            crop: CropRect { y0: 8, x0: 4, h: 32, w: 32 },
            output_size: 32,
            flip: false,
            jitter: Some(JitterParams { brightness: 1.3, contrast: 0.7, saturation: 1.2, hue: 0.1 }),
            grayscale: true,
            blur_sigma: Some(1.5),
        };
        let warped = warp_mask(&s.mask, &record);
        let expected = s.mask.slice(ndarray::s![8..40, 4..36]).to_owned();
        assert_eq!(warped, expected);
        // Photometric fields do not influence the mask.
        let plain = AugmentRecord { jitter: None, grayscale: false, blur_sigma: None, ..record };
        assert_eq!(warp_mask(&s.mask, &plain), warped);
    }

    #[test]
    fn blur_kernel_radius_and_mass() {
        for &sigma in &[0.1, 0.7, 2.0] {
            let k = gaussian_kernel(sigma);
            assert_eq!(k.len(), 2 * (3.0f64 * sigma).ceil() as usize + 1);
            assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = AugmentConfig { crop_scale_range: (0.0, 1.0), ..Default::default() };
        assert!(matches!(bad.validate(), Err(DscError::Config(_))));
        let bad = AugmentConfig { crop_scale_range: (0.8, 0.5), ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = AugmentConfig { flip_prob: 1.5, ..Default::default() };
        assert!(bad.validate().is_err());
        let tiny = AugmentConfig { crop_scale_range: (1e-4, 1.0), ..Default::default() };
        let mut rng = stream_rng(0, 0, 0);
        assert!(matches!(sample_record(8, 8, &tiny, &mut rng), Err(DscError::Config(_))));
    }
}
