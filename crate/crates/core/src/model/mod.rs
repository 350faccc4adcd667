//! Online and momentum encoders, the EMA update and negative queues.

pub mod encoder;
pub mod layers;
pub mod params;
pub mod queue;

use ndarray::{Array2, Array3, ArrayView2};

pub use encoder::{Encoder, EncoderOutput, ForwardCache, ModelConfig, NormMode, NormStats, RUNNING_STATS_MOMENTUM};
pub use layers::FeatureMap;
pub use params::{ParamKind, ParamSet, Tensor};
pub use queue::NegativeQueue;

use crate::error::{DscError, Result};

/// S x S grid of unit-norm D-dimensional cell embeddings, rows in row-major cell order.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseEmbeddingMap {
    pub grid: usize,
    pub cells: Array2<f64>,
}

impl DenseEmbeddingMap {
    pub fn new(grid: usize, cells: Array2<f64>) -> Result<Self> {
        if cells.nrows() != grid * grid {
            return Err(DscError::Shape(format!(
                "{} cells do not form a {grid}x{grid} grid",
                cells.nrows()
            )));
        }
        Ok(Self { grid, cells })
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.cells.view()
    }

    pub fn dim(&self) -> usize {
        self.cells.ncols()
    }

    pub fn cell(&self, row: usize, col: usize) -> ndarray::ArrayView1<'_, f64> {
        self.cells.row(row * self.grid + col)
    }
}

/// Global embeddings, one unit-norm row per image, using running statistics.
pub fn encode_global(encoder: &Encoder, params: &ParamSet, images: &[Array3<f64>]) -> Result<Array2<f64>> {
    let batch = encoder.batch_images(images)?;
    Ok(encoder.forward(params, batch, NormMode::Running)?.global)
}

/// Dense maps, one per image, in input order, using running statistics.
pub fn encode_dense(
    encoder: &Encoder,
    params: &ParamSet,
    images: &[Array3<f64>],
) -> Result<Vec<DenseEmbeddingMap>> {
    let batch = encoder.batch_images(images)?;
    let out = encoder.forward(params, batch, NormMode::Running)?;
    (0..out.batch())
        .map(|b| DenseEmbeddingMap::new(out.grid, out.dense_map(b).to_owned()))
        .collect()
}

/// Gradient-free copy of the encoder tracked by exponential moving average.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumEncoderState {
    pub params: ParamSet,
    pub momentum: f64,
}

impl MomentumEncoderState {
    pub fn new(online: &ParamSet, momentum: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(DscError::Config(format!("momentum must be in [0, 1], got {momentum}")));
        }
        Ok(Self {
            params: online.clone(),
            momentum,
        })
    }
}

/// `target <- m * target + (1 - m) * online`, elementwise.
pub fn momentum_update(online: &ParamSet, target: &mut MomentumEncoderState) -> Result<()> {
    target.params.check_same_layout(online)?;
    let m = target.momentum;
    for (t, o) in target.params.tensors.iter_mut().zip(&online.tensors) {
        for (tv, &ov) in t.data.iter_mut().zip(&o.data) {
            *tv = m * *tv + (1.0 - m) * ov;
        }
    }
    Ok(())
}
