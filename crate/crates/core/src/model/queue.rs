use ndarray::{Array2, ArrayView2};

use crate::error::{DscError, Result};

/// Tolerance on `|‖x‖ - 1|` for vectors entering a queue.
pub const UNIT_NORM_TOL: f64 = 1e-6;

/// Fixed-capacity FIFO of unit-norm embeddings used as negatives.
#[derive(Debug, Clone)]
pub struct NegativeQueue {
    capacity: usize,
    dim: usize,
    buffer: Array2<f64>,
    /// Next slot to overwrite.
    cursor: usize,
    len: usize,
}

/// Queues are equal when they hold the same vectors in the same order.
impl PartialEq for NegativeQueue {
    fn eq(&self, other: &Self) -> bool {
        self.capacity == other.capacity && self.dim == other.dim && self.negatives() == other.negatives()
    }
}

impl NegativeQueue {
    pub fn new(capacity: usize, dim: usize) -> Self {
        Self {
            capacity,
            dim,
            buffer: Array2::zeros((capacity, dim)),
            cursor: 0,
            len: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Enqueues rows in order, evicting the oldest entries once full.
    pub fn push(&mut self, batch: ArrayView2<'_, f64>) -> Result<()> {
        if batch.nrows() == 0 {
            return Ok(());
        }
        if batch.ncols() != self.dim {
            return Err(DscError::Shape(format!(
                "queue holds {}-d vectors, got {}-d",
                self.dim,
                batch.ncols()
            )));
        }
        for (i, row) in batch.rows().into_iter().enumerate() {
            let norm = row.dot(&row).sqrt();
            if (norm - 1.0).abs() > UNIT_NORM_TOL || !norm.is_finite() {
                return Err(DscError::Contract(format!(
                    "queue input row {i} has norm {norm}, expected unit norm"
                )));
            }
        }
        if self.capacity == 0 {
            return Ok(());
        }
        for row in batch.rows() {
            self.buffer.row_mut(self.cursor).assign(&row);
            self.cursor = (self.cursor + 1) % self.capacity;
            self.len = (self.len + 1).min(self.capacity);
        }
        Ok(())
    }

    /// Snapshot of the stored vectors, oldest first. Empty queue gives a `0 x dim` matrix.
    pub fn negatives(&self) -> Array2<f64> {
        let start = (self.cursor + self.capacity - self.len) % self.capacity.max(1);
        let mut out = Array2::zeros((self.len, self.dim));
        for i in 0..self.len {
            out.row_mut(i).assign(&self.buffer.row((start + i) % self.capacity));
        }
        out
    }

    /// Rebuilds a queue from a snapshot (oldest first), e.g. when loading a checkpoint.
    pub fn from_rows(capacity: usize, rows: ArrayView2<'_, f64>) -> Result<Self> {
        if rows.nrows() > capacity {
            return Err(DscError::Shape(format!(
                "{} rows exceed queue capacity {capacity}",
                rows.nrows()
            )));
        }
        let mut q = Self::new(capacity, rows.ncols());
        q.push(rows)?;
        Ok(q)
    }
}
