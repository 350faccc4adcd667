//! Synthetic shapes dataset with per-pixel class masks.
//!
//! Each foreground class pairs a shape type with a base hue. Images hold one to
//! three non-overlapping shapes on a striped, noisy background, so every object
//! is a single connected region of the mask.

pub mod augment;
pub mod color;
pub mod export;

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{DscError, Result};
use crate::rng::{stream_rng, STREAM_SAMPLE};

pub use augment::{
    apply_record, sample_record, two_views, warp_mask, AugmentConfig, AugmentRecord, CropRect,
    JitterParams, ViewPair,
};

/// Largest number of classes the u8 masks can carry.
pub const MAX_CLASSES: usize = 64;
pub const MIN_IMAGE_SIZE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
    Diamond,
    Cross,
    Ring,
}

impl ShapeKind {
    const ALL: [ShapeKind; 6] = [
        ShapeKind::Disk,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Diamond,
        ShapeKind::Cross,
        ShapeKind::Ring,
    ];

    /// Shape used for foreground class `class_id` (1-based).
    pub fn for_class(class_id: u8) -> ShapeKind {
        Self::ALL[(class_id as usize - 1) % Self::ALL.len()]
    }

    /// Membership of the offset `(dy, dx)` from the shape center.
    fn contains(self, dy: f64, dx: f64, r: f64) -> bool {
        match self {
            ShapeKind::Disk => dy * dy + dx * dx <= r * r,
            ShapeKind::Square => dy.abs() <= 0.85 * r && dx.abs() <= 0.85 * r,
            ShapeKind::Diamond => dy.abs() + dx.abs() <= r,
            ShapeKind::Cross => {
                let arm = r / 3.0;
                (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
            }
            ShapeKind::Ring => {
                let d2 = dy * dy + dx * dx;
                d2 <= r * r && d2 >= 0.3 * r * r
            }
            ShapeKind::Triangle => {
                // Upward triangle inscribed in the circle of radius r.
                let verts = [(-r, 0.0), (0.5 * r, 0.866 * r), (0.5 * r, -0.866 * r)];
                let mut sign = 0.0f64;
                for k in 0..3 {
                    let (ay, ax) = verts[k];
                    let (by, bx) = verts[(k + 1) % 3];
                    let cross = (bx - ax) * (dy - ay) - (by - ay) * (dx - ax);
                    if cross != 0.0 {
                        if sign == 0.0 {
                            sign = cross.signum();
                        } else if cross.signum() != sign {
                            return false;
                        }
                    }
                }
                true
            }
        }
    }
}

/// One rendered object. The bounding box is half-open `[y0, y1) x [x0, x1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeInstance {
    pub class_id: u8,
    pub kind: ShapeKind,
    pub center: (f64, f64),
    pub radius: f64,
    pub bbox: (usize, usize, usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub sample_id: u64,
    /// H x W x 3, values in [0, 1].
    pub image: Array3<f64>,
    /// H x W class ids, 0 is background.
    pub mask: Array2<u8>,
    pub objects: Vec<ShapeInstance>,
}

impl SyntheticSample {
    pub fn size(&self) -> (usize, usize) {
        (self.mask.nrows(), self.mask.ncols())
    }

    /// Foreground class covering the most pixels; the image-level label.
    pub fn dominant_class(&self) -> u8 {
        let mut counts = [0usize; MAX_CLASSES];
        for &c in self.mask.iter() {
            counts[c as usize] += 1;
        }
        let mut best = 1usize;
        for (c, &n) in counts.iter().enumerate().skip(1) {
            if n > counts[best] {
                best = c;
            }
        }
        best as u8
    }
}

pub fn validate(n_samples: usize, num_classes: usize, image_size: usize) -> Result<()> {
    if n_samples < 1 {
        return Err(DscError::Config("n_samples must be at least 1".into()));
    }
    if !(2..=MAX_CLASSES).contains(&num_classes) {
        return Err(DscError::Config(format!(
            "num_classes must be in 2..={MAX_CLASSES}, got {num_classes}"
        )));
    }
    if image_size < MIN_IMAGE_SIZE {
        return Err(DscError::Config(format!(
            "image_size must be at least {MIN_IMAGE_SIZE}, got {image_size}"
        )));
    }
    Ok(())
}

/// Generates `n_samples` images with ids `0..n_samples`.
pub fn generate_dataset(
    n_samples: usize,
    num_classes: usize,
    image_size: usize,
    rng_seed: u64,
) -> Result<Vec<SyntheticSample>> {
    validate(n_samples, num_classes, image_size)?;
    (0..n_samples as u64)
        .map(|id| generate_sample(id, num_classes, image_size, rng_seed))
        .collect()
}

/// Renders a single sample. Depends only on `(sample_id, num_classes, image_size, rng_seed)`.
pub fn generate_sample(
    sample_id: u64,
    num_classes: usize,
    image_size: usize,
    rng_seed: u64,
) -> Result<SyntheticSample> {
    validate(1, num_classes, image_size)?;
    let mut rng = stream_rng(rng_seed, STREAM_SAMPLE, sample_id);
    let size = image_size;
    let fg_classes = num_classes - 1;
    let noise = Normal::new(0.0, 0.03).expect("valid sigma");

    let mut image = Array3::<f64>::zeros((size, size, 3));
    let mut mask = Array2::<u8>::zeros((size, size));

    // Background: desaturated base color with oriented stripes and pixel noise.
    let bg_hue: f64 = rng.gen();
    let bg_sat = rng.gen_range(0.0..0.15);
    let bg_val = rng.gen_range(0.3..0.7);
    let base = color::hsv_to_rgb(bg_hue, bg_sat, bg_val);
    let theta = rng.gen_range(0.0..std::f64::consts::PI);
    let freq = rng.gen_range(0.15..0.6);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let (st, ct) = theta.sin_cos();
    for y in 0..size {
        for x in 0..size {
            let stripe = 0.06 * ((x as f64 * ct + y as f64 * st) * freq + phase).sin();
            for ch in 0..3 {
                image[[y, x, ch]] = base[ch] + stripe + noise.sample(&mut rng);
            }
        }
    }

    // Object placement with separated bounding boxes.
    let n_objects = rng.gen_range(1..=3usize);
    let mut objects: Vec<ShapeInstance> = Vec::with_capacity(n_objects);
    for k in 0..n_objects {
        let class_id = if k == 0 {
            (sample_id % fg_classes as u64) as u8 + 1
        } else {
            rng.gen_range(1..=fg_classes) as u8
        };
        let kind = ShapeKind::for_class(class_id);
        for _attempt in 0..50 {
            let radius = rng.gen_range(0.14..0.24) * size as f64;
            let lo = radius + 1.0;
            let hi = size as f64 - radius - 1.0;
            let cy = rng.gen_range(lo..hi);
            let cx = rng.gen_range(lo..hi);
            let bbox = (
                (cy - radius).floor().max(0.0) as usize,
                (cx - radius).floor().max(0.0) as usize,
                ((cy + radius).ceil() as usize + 1).min(size),
                ((cx + radius).ceil() as usize + 1).min(size),
            );
            let clear = objects.iter().all(|o| {
                bbox.2 < o.bbox.0 || o.bbox.2 < bbox.0 || bbox.3 < o.bbox.1 || o.bbox.3 < bbox.1
            });
            if clear {
                objects.push(ShapeInstance {
                    class_id,
                    kind,
                    center: (cy, cx),
                    radius,
                    bbox,
                });
                break;
            }
        }
    }

    for obj in &objects {
        let hue = (obj.class_id as f64 - 1.0) / fg_classes as f64 + rng.gen_range(-0.04..0.04);
        let sat = rng.gen_range(0.55..0.95);
        let val = rng.gen_range(0.55..0.95);
        let rgb = color::hsv_to_rgb(hue.rem_euclid(1.0), sat, val);
        let (y0, x0, y1, x1) = obj.bbox;
        for y in y0..y1 {
            for x in x0..x1 {
                let dy = y as f64 + 0.5 - obj.center.0;
                let dx = x as f64 + 0.5 - obj.center.1;
                if obj.kind.contains(dy, dx, obj.radius) {
                    mask[[y, x]] = obj.class_id;
                    for ch in 0..3 {
                        image[[y, x, ch]] = rgb[ch] + noise.sample(&mut rng);
                    }
                }
            }
        }
    }

    image.mapv_inplace(|v| v.clamp(0.0, 1.0));
    Ok(SyntheticSample {
        sample_id,
        image,
        mask,
        objects,
    })
}
