//! Dense 64-bit tensors and reverse-mode automatic differentiation.
//!
//! `Tensor` is the plain value type (parameters, datasets, constants);
//! `tape::Tape` records primitive operations eagerly during a forward pass
//! and replays them in reverse for gradients. All storage is row-major f64.

pub mod checkpoint;
pub mod tape;

use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: lhs {lhs:?} vs rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: shape {shape:?} does not hold {expected} values")]
    BadLength {
        op: &'static str,
        shape: Vec<usize>,
        expected: usize,
    },
    #[error("domain error in {op}: value {value}")]
    Domain { op: &'static str, value: f64 },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("backward on an empty tape")]
    EmptyTape,
    #[error("pixel shuffle: channel extent {channels} not divisible by r^2 = {rsq}")]
    BadPixelShuffle { channels: usize, rsq: usize },
}

/// Dense n-dimensional array of f64 values, row-major.
///
/// Data is behind an `Arc` so inserting a tensor into a tape as a leaf is a
/// pointer copy; `data_mut` performs copy-on-write for parameter updates.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::BadLength {
                op: "Tensor::new",
                shape,
                expected: data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new(vec![0.0; n]),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new(vec![value; n]),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: Arc::new(vec![value]),
            requires_grad: false,
            grad: None,
        }
    }

    /// i.i.d. normal entries with the given standard deviation.
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut impl rand::Rng) -> Self {
        use rand_distr::{Distribution, StandardNormal};
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Tensor {
            shape,
            data: Arc::new(data),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Copy-on-write mutable access for parameter updates.
    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub(crate) fn arc(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Deterministic sum: fixed four-lane accumulation independent of the
/// compiler's vectorization choices.
pub(crate) fn det_sum(xs: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let mut chunks = xs.chunks_exact(4);
    for c in &mut chunks {
        acc[0] += c[0];
        acc[1] += c[1];
        acc[2] += c[2];
        acc[3] += c[3];
    }
    let mut tail = 0.0;
    for &v in chunks.remainder() {
        tail += v;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Deterministic dot product, same accumulation pattern as `det_sum`.
pub(crate) fn det_dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        acc[0] = x[0].mul_add(y[0], acc[0]);
        acc[1] = x[1].mul_add(y[1], acc[1]);
        acc[2] = x[2].mul_add(y[2], acc[2]);
        acc[3] = x[3].mul_add(y[3], acc[3]);
    }
    let mut tail = 0.0;
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail = x.mul_add(y, tail);
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_validates_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn det_sum_matches_naive() {
        let xs: Vec<f64> = (0..103).map(|i| (i as f64) * 0.37 - 11.0).collect();
        let naive: f64 = xs.iter().sum();
        assert!((det_sum(&xs) - naive).abs() < 1e-9);
    }
}
