//! Dense tensors, a reverse-mode tape, and the gradient-check harness.

mod checkpoint;
mod contract;
mod gradcheck;
pub(crate) mod ops;
mod params;
mod tape;

use thiserror::Error;

use crate::scalar::Scalar;

pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointError, CHECKPOINT_MAGIC};
pub use contract::{contract, ContractSpec};
pub use gradcheck::{grad_check, grad_check_params, GradCheckReport};
pub use ops::Unary;
pub use params::{Binding, ParamId, ParamStore};
pub use tape::{Tape, Var};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("axis {axis} out of range for rank {rank}")]
    Axis { axis: usize, rank: usize },
    #[error("domain error in {op}: argument {value}")]
    Domain { op: &'static str, value: f64 },
    #[error("data length {got} does not match shape product {expected}")]
    DataLength { expected: usize, got: usize },
    #[error("invalid contraction spec {spec:?}: {reason}")]
    Spec { spec: String, reason: String },
    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// Row-major dense array with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
    requires_grad: bool,
    grad: Option<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                expected,
                got: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| S::lit(v)).collect())
    }

    /// Builds a matrix from rows; panics on ragged input (test/convenience use).
    pub fn matrix(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::from_f64(&[rows.len(), cols], &data).expect("matrix shape")
    }

    pub fn vector(values: &[f64]) -> Self {
        Self::from_f64(&[values.len()], values).expect("vector shape")
    }

    pub fn scalar(value: S) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, S::one())
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = S::one();
        }
        t
    }

    /// Entries drawn i.i.d. from N(0, std²).
    pub fn randn(shape: &[usize], std: f64, rng: &mut crate::rng::Rng) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| S::lit(rng.normal() * std)).collect();
        Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    pub(crate) fn grad_mut_or_init(&mut self) -> &mut Vec<S> {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![S::zero(); n])
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> S {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Element of a rank-2 tensor.
    pub fn at(&self, row: usize, col: usize) -> S {
        assert_eq!(self.rank(), 2);
        self.data[row * self.shape[1] + col]
    }

    pub fn row(&self, row: usize) -> &[S] {
        assert_eq!(self.rank(), 2);
        let c = self.shape[1];
        &self.data[row * c..(row + 1) * c]
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(TensorError::DataLength {
                expected,
                got: self.data.len(),
            });
        }
        self.shape = shape.to_vec();
        self.grad = None;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs().as_f64())
            .fold(0.0, f64::max)
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }
}

pub(crate) fn check_rank2<S: Scalar>(op: &'static str, t: &Tensor<S>) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(TensorError::Shape {
            op,
            lhs: other.to_vec(),
            rhs: vec![0, 0],
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_product_must_match() {
        let err = Tensor::<f64>::new(&[2, 3], vec![0.0; 5]).unwrap_err();
        assert_eq!(err, TensorError::DataLength { expected: 6, got: 5 });
        assert!(Tensor::<f64>::new(&[], vec![1.0]).is_ok());
    }

    #[test]
    fn grad_buffer_matches_shape() {
        let mut t = Tensor::<f64>::zeros(&[3, 2]).with_grad();
        assert!(t.grad().is_none());
        assert_eq!(t.grad_mut_or_init().len(), 6);
        t.clear_grad();
        assert!(t.grad().is_none());
    }

    #[test]
    fn eye_and_accessors() {
        let i = Tensor::<f32>::eye(3);
        assert_eq!(i.at(1, 1), 1.0);
        assert_eq!(i.at(1, 2), 0.0);
        assert_eq!(i.row(2), &[0.0, 0.0, 1.0]);
    }
}
