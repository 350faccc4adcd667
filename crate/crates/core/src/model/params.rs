use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DscError, Result};

/// Weight-decay treatment follows the kind: only `Weight` tensors decay.
/// `Stat` tensors hold running normalization statistics and are never trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Weight,
    Bias,
    Norm,
    Stat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn view1(&self) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.data[..])
    }

    pub fn view2(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.shape[0], self.shape[1]), &self.data).expect("rank-2 tensor")
    }

    pub fn view2_mut(&mut self) -> ArrayViewMut2<'_, f64> {
        ArrayViewMut2::from_shape((self.shape[0], self.shape[1]), &mut self.data)
            .expect("rank-2 tensor")
    }
}

/// Ordered collection of named tensors. Gradients and optimizer buffers reuse
/// the same type with identical names and shapes.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    pub names: Vec<String>,
    pub kinds: Vec<ParamKind>,
    pub tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn push(&mut self, name: impl Into<String>, kind: ParamKind, tensor: Tensor) -> usize {
        self.names.push(name.into());
        self.kinds.push(kind);
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            kinds: self.kinds.clone(),
            tensors: self.tensors.iter().map(|t| Tensor::zeros(&t.shape)).collect(),
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn check_same_layout(&self, other: &ParamSet) -> Result<()> {
        if self.names != other.names {
            return Err(DscError::Shape("parameter sets have different names".into()));
        }
        for (i, (a, b)) in self.tensors.iter().zip(&other.tensors).enumerate() {
            if a.shape != b.shape {
                return Err(DscError::Shape(format!(
                    "parameter `{}`: {:?} vs {:?}",
                    self.names[i], a.shape, b.shape
                )));
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// SHA-256 over names, shapes and the exact bit patterns of every value.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.names.iter().zip(&self.tensors) {
            h.update(name.as_bytes());
            for &d in &t.shape {
                h.update((d as u64).to_le_bytes());
            }
            for &v in &t.data {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data.iter().copied()).collect()
    }
}

/// Row-major flattening that copes with non-standard layouts.
pub trait IntoRowMajorVec {
    fn into_row_major_vec(self) -> Vec<f64>;
}

impl IntoRowMajorVec for Array2<f64> {
    fn into_row_major_vec(self) -> Vec<f64> {
        if self.is_standard_layout() {
            self.into_raw_vec_and_offset().0
        } else {
            self.iter().copied().collect()
        }
    }
}
