//! Dense 4-D tensors and reverse-mode automatic differentiation.
//!
//! Layout is batch-channel-height-width, row-major contiguous. Normal
//! inference and training run in `f32`; gradient checking runs the same
//! generic code in `f64`, where central differences are trustworthy.

mod conv;
mod gradcheck;
mod norm;
mod ops;
mod tape;

pub use gradcheck::{gradcheck, GradReport};
pub use norm::BnStats;
pub use tape::{Grads, Tape, Var};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// (batch, channels, height, width)
pub type Shape = [usize; 4];

pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssign
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

pub fn numel(shape: Shape) -> usize {
    shape[0] * shape[1] * shape[2] * shape[3]
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub shape: Shape,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != numel(shape) {
            return Err(Error::shape(
                "tensor",
                format!("data length {} != product of shape {:?}", data.len(), shape),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor { shape, data: vec![T::zero(); numel(shape)] }
    }

    pub fn full(shape: Shape, v: f64) -> Self {
        Tensor { shape, data: vec![T::from_f64(v); numel(shape)] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: [1, 1, 1, 1], data: vec![T::from_f64(v)] }
    }

    pub fn from_f64s(shape: Shape, vals: &[f64]) -> Result<Self> {
        Tensor::new(shape, vals.iter().map(|&v| T::from_f64(v)).collect())
    }

    /// Uniform in [lo, hi) from the given rng.
    pub fn uniform(shape: Shape, lo: f64, hi: f64, rng: &mut Rng) -> Self {
        let data = (0..numel(shape)).map(|_| T::from_f64(rng.uniform(lo, hi))).collect();
        Tensor { shape, data }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape == [1, 1, 1, 1]
    }

    pub fn scalar_value(&self) -> T {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    #[inline]
    pub fn idx(&self, b: usize, c: usize, h: usize, w: usize) -> usize {
        ((b * self.shape[1] + c) * self.shape[2] + h) * self.shape[3] + w
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.idx(b, c, h, w)]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, &v| m.max(v.to_f64().abs()))
    }

    /// Lossy precision change; used to lift f32 checkpoints into f64
    /// gradient-check mode and back.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Tensor::<f32>::new([1, 1, 2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn indexing_is_row_major() {
        let t = Tensor::<f32>::from_f64s([1, 2, 2, 2], &[0., 1., 2., 3., 4., 5., 6., 7.]).unwrap();
        assert_eq!(t.at(0, 1, 1, 0), 6.0);
        assert_eq!(t.at(0, 0, 1, 1), 3.0);
    }
}
