//! Dense row-major tensor value type.
//!
//! A `Tensor` is an immutable value after creation; differentiation happens
//! through [`crate::tape`], which stores tensors at its nodes. Only rank 1 and
//! rank 2 are used by the model, but the container itself is rank-agnostic.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    /// Build a tensor, validating the shape/data contract and rejecting
    /// non-finite entries at this boundary.
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("tensor_new", &shape, &[]));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "tensor_new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerics(format!(
                "non-finite entry in tensor of shape {shape:?}"
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![S::zero(); numel],
        }
    }

    pub fn scalar(v: S) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self> {
        let cols = rows.first().map(|r| r.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::shape("from_rows", &[rows.len(), cols], &[r.len()]));
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows/cols view of a rank-1 or rank-2 tensor: rank-1 counts as a single
    /// row.
    pub fn rows_cols(&self) -> (usize, usize) {
        match self.shape.len() {
            1 => (1, self.shape[0]),
            2 => (self.shape[0], self.shape[1]),
            _ => panic!("rows_cols on rank-{} tensor", self.shape.len()),
        }
    }

    pub fn at2(&self, r: usize, c: usize) -> S {
        let (_, cols) = self.rows_cols();
        self.data[r * cols + c]
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Max absolute entry, for tolerance reporting.
    pub fn max_abs(&self) -> S {
        self.data
            .iter()
            .fold(S::zero(), |m, v| if v.abs() > m { v.abs() } else { m })
    }

    /// Elementwise max absolute difference against another tensor of the same
    /// shape.
    pub fn max_abs_diff(&self, other: &Tensor<S>) -> S {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(S::zero(), |m, (a, b)| {
                let d = (*a - *b).abs();
                if d > m {
                    d
                } else {
                    m
                }
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_numel() {
        let err = Tensor::<f64>::new(vec![2, 2], vec![1.0, 2.0, 3.0]);
        assert!(matches!(err, Err(Error::Shape { .. })));
    }

    #[test]
    fn new_rejects_zero_dim() {
        let err = Tensor::<f64>::new(vec![0, 3], vec![]);
        assert!(matches!(err, Err(Error::Shape { .. })));
    }

    #[test]
    fn new_rejects_non_finite() {
        let err = Tensor::<f64>::new(vec![2], vec![1.0, f64::NAN]);
        assert!(matches!(err, Err(Error::Numerics(_))));
    }

    #[test]
    fn rows_cols_rank1() {
        let t = Tensor::<f64>::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(t.rows_cols(), (1, 3));
        assert_eq!(t.at2(0, 2), 3.0);
    }
}
