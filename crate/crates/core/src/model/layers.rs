//! Forward/backward kernels for the small convolutional encoder.
//!
//! Activations are NHWC feature maps stored as `(b * h * w) x c` matrices, so
//! 1x1 convolutions and linear layers are plain matrix products.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};

/// NHWC activation stored row-major as `(b * h * w) x c`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub data: Array2<f64>,
}

impl FeatureMap {
    pub fn new(batch: usize, height: usize, width: usize, data: Array2<f64>) -> Self {
        debug_assert_eq!(data.nrows(), batch * height * width);
        Self {
            batch,
            height,
            width,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.data.ncols()
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }
}

/// Geometry of a square convolution with symmetric zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_size(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

/// Unfolds input patches into rows laid out as `(ky, kx, c)`.
pub fn im2col(x: &FeatureMap, g: ConvGeom) -> Array2<f64> {
    let c = x.channels();
    let (ho, wo) = (g.out_size(x.height), g.out_size(x.width));
    let k = g.kernel;
    let mut cols = Array2::<f64>::zeros((x.batch * ho * wo, k * k * c));
    let src = x.data.as_slice().expect("contiguous activations");
    let dst = cols.as_slice_mut().expect("contiguous columns");
    let row_len = k * k * c;
    for b in 0..x.batch {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = (b * ho + oy) * wo + ox;
                let out = &mut dst[row * row_len..(row + 1) * row_len];
                for ky in 0..k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= x.height as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= x.width as isize {
                            continue;
                        }
                        let cell = (b * x.height + iy as usize) * x.width + ix as usize;
                        let o = (ky * k + kx) * c;
                        out[o..o + c].copy_from_slice(&src[cell * c..(cell + 1) * c]);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input grid.
pub fn col2im(
    dcols: &Array2<f64>,
    batch: usize,
    height: usize,
    width: usize,
    channels: usize,
    g: ConvGeom,
) -> FeatureMap {
    let (ho, wo) = (g.out_size(height), g.out_size(width));
    let k = g.kernel;
    let c = channels;
    let mut dx = Array2::<f64>::zeros((batch * height * width, c));
    let dst = dx.as_slice_mut().expect("contiguous");
    let src = dcols.as_slice().expect("contiguous");
    let row_len = k * k * c;
    for b in 0..batch {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = (b * ho + oy) * wo + ox;
                let inp = &src[row * row_len..(row + 1) * row_len];
                for ky in 0..k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= height as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= width as isize {
                            continue;
                        }
                        let cell = (b * height + iy as usize) * width + ix as usize;
                        let o = (ky * k + kx) * c;
                        for (d, v) in dst[cell * c..(cell + 1) * c].iter_mut().zip(&inp[o..o + c]) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
    FeatureMap::new(batch, height, width, dx)
}

pub fn affine(x: &ArrayView2<f64>, w: &ArrayView2<f64>, b: &ArrayView1<f64>) -> Array2<f64> {
    let mut y = x.dot(w);
    y += b;
    y
}

/// Gradients of `y = x w + b`; returns `(dx, dw, db)`.
pub fn affine_backward(
    dy: &Array2<f64>,
    x: &ArrayView2<f64>,
    w: &ArrayView2<f64>,
    need_dx: bool,
) -> (Option<Array2<f64>>, Array2<f64>, Array1<f64>) {
    let dw = x.t().dot(dy);
    let db = dy.sum_axis(Axis(0));
    let dx = need_dx.then(|| dy.dot(&w.t()));
    (dx, dw, db)
}

pub fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Masks `dy` by the sign pattern of the pre-activation.
pub fn relu_backward(dy: &Array2<f64>, pre: &Array2<f64>) -> Array2<f64> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(pre).for_each(|d, &p| {
        if p <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

pub const BN_EPS: f64 = 1e-5;

/// Saved values of a batch normalization in training mode.
#[derive(Debug, Clone)]
pub struct BatchNormCache {
    pub xhat: Array2<f64>,
    pub inv_std: Array1<f64>,
    pub mean: Array1<f64>,
    /// Biased batch variance.
    pub var: Array1<f64>,
}

/// Per-channel normalization with statistics over all rows (batch and space).
pub fn batch_norm(x: &Array2<f64>, gamma: &ArrayView1<f64>, beta: &ArrayView1<f64>) -> (Array2<f64>, BatchNormCache) {
    let mean = x.mean_axis(Axis(0)).expect("non-empty batch");
    let centered = x - &mean;
    let var = centered.mapv(|v| v * v).mean_axis(Axis(0)).expect("non-empty batch");
    let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
    let xhat = centered * &inv_std;
    let y = &xhat * gamma + beta;
    (y, BatchNormCache { xhat, inv_std, mean, var })
}

/// Inference-mode normalization with fixed statistics.
pub fn batch_norm_fixed(
    x: &Array2<f64>,
    mean: &ArrayView1<f64>,
    var: &ArrayView1<f64>,
    gamma: &ArrayView1<f64>,
    beta: &ArrayView1<f64>,
) -> Array2<f64> {
    let scale = ndarray::Zip::from(gamma).and(var).map_collect(|&g, &v| g / (v + BN_EPS).sqrt());
    (x - mean) * &scale + beta
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batch_norm_backward(
    dy: &Array2<f64>,
    cache: &BatchNormCache,
    gamma: &ArrayView1<f64>,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let n = dy.nrows() as f64;
    let dgamma = (dy * &cache.xhat).sum_axis(Axis(0));
    let dbeta = dy.sum_axis(Axis(0));
    let dxhat = dy * gamma;
    let mean_dh = dxhat.sum_axis(Axis(0)) / n;
    let mean_dh_xh = (&dxhat * &cache.xhat).sum_axis(Axis(0)) / n;
    let dx = (dxhat - &mean_dh - &cache.xhat * &mean_dh_xh) * &cache.inv_std;
    (dx, dgamma, dbeta)
}

/// Row-wise L2 normalization. Returns `(y, norms)`.
pub fn l2_normalize_rows(x: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let norms = x.map_axis(Axis(1), |r| r.dot(&r).sqrt().max(1e-12));
    let y = x / &norms.view().insert_axis(Axis(1));
    (y, norms)
}

pub fn l2_normalize_rows_backward(dy: &Array2<f64>, y: &Array2<f64>, norms: &Array1<f64>) -> Array2<f64> {
    let proj = (dy * y).sum_axis(Axis(1));
    let mut dx = dy - &(y * &proj.view().insert_axis(Axis(1)));
    dx /= &norms.view().insert_axis(Axis(1));
    dx
}

/// Spatial mean per sample: `(b * h * w) x c` to `b x c`.
pub fn global_avg_pool(x: &FeatureMap) -> Array2<f64> {
    let cells = x.cells();
    let mut out = Array2::<f64>::zeros((x.batch, x.channels()));
    for b in 0..x.batch {
        out.row_mut(b)
            .assign(&x.data.slice(s![b * cells..(b + 1) * cells, ..]).mean_axis(Axis(0)).unwrap());
    }
    out
}

pub fn global_avg_pool_backward(dy: &Array2<f64>, batch: usize, cells: usize) -> Array2<f64> {
    let mut dx = Array2::<f64>::zeros((batch * cells, dy.ncols()));
    let scale = 1.0 / cells as f64;
    for b in 0..batch {
        let row = dy.row(b).mapv(|v| v * scale);
        for i in 0..cells {
            dx.row_mut(b * cells + i).assign(&row);
        }
    }
    dx
}
