//! Dense row-major tensors, the numeric kernels the depth network needs, and a
//! per-frame reverse-mode tape.

mod kernels;
mod tape;

pub use kernels::{batch_norm, conv2d, laplacian, upsample_bilinear, BnMode};
pub use tape::{BnBatchStats, Gradients, Tape, Var};
pub(crate) use kernels::update_running_stats;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Contiguous row-major storage; the last axis varies fastest.
///
/// Images and feature maps use `[H, W, C]`, single-channel maps `[H, W]`,
/// convolution kernels `[k, k, Cin, Cout]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {shape:?} holds {n} values, data has {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor { shape, data: vec![value; n] }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Tensor { shape, data: (0..n).map(&mut f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::Usage(format!("item() on tensor of shape {:?}", self.shape)))
        }
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dim(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    /// `(H, W, C)` of a rank-3 tensor, or `(H, W, 1)` for rank 2.
    pub fn hwc(&self) -> Result<(usize, usize, usize)> {
        match *self.shape.as_slice() {
            [h, w] => Ok((h, w, 1)),
            [h, w, c] => Ok((h, w, c)),
            _ => Err(Error::dim("hwc", format!("expected rank 2 or 3, got {:?}", self.shape))),
        }
    }

    /// `(H, W)` of a single-channel map (`[H, W]` or `[H, W, 1]`).
    pub fn hw(&self) -> Result<(usize, usize)> {
        match *self.shape.as_slice() {
            [h, w] | [h, w, 1] => Ok((h, w)),
            _ => Err(Error::dim("hw", format!("expected a single-channel map, got {:?}", self.shape))),
        }
    }

    pub fn at2(&self, y: usize, x: usize) -> T {
        self.data[y * self.shape[1] + x]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape == other.shape {
            let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
            Ok(Tensor { shape: self.shape.clone(), data })
        } else if other.is_scalar() {
            let b = other.data[0];
            Ok(self.map(|a| f(a, b)))
        } else if self.is_scalar() {
            let a = self.data[0];
            Ok(other.map(|b| f(a, b)))
        } else {
            Err(Error::dim(op, format!("{:?} vs {:?}", self.shape, other.shape)))
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|v| v * c)
    }

    pub fn abs(&self) -> Self {
        self.map(|v| v.abs())
    }

    pub fn relu(&self) -> Self {
        self.map(|v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn sigmoid(&self) -> Self {
        self.map(sigmoid)
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f32>::new([2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new([2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn mul_by_ones_is_identity() {
        let a = Tensor::new([2, 2], vec![1.0f32, -2.0, 3.5, 0.25]).unwrap();
        assert_eq!(a.mul(&Tensor::ones([2, 2])).unwrap(), a);
    }

    #[test]
    fn abs_values() {
        let a = Tensor::new([3], vec![-1.0f64, 0.0, 2.0]).unwrap();
        assert_eq!(a.abs().data(), &[1.0, 0.0, 2.0]);
    }

    #[test]
    fn scalar_broadcast_and_mismatch() {
        let a = Tensor::new([3], vec![1.0f32, 2.0, 3.0]).unwrap();
        let s = Tensor::scalar(2.0f32);
        assert_eq!(a.mul(&s).unwrap().data(), &[2.0, 4.0, 6.0]);
        assert_eq!(s.sub(&a).unwrap().data(), &[1.0, 0.0, -1.0]);
        let b = Tensor::<f32>::zeros([2]);
        assert!(matches!(a.add(&b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(-1000.0f32), 0.0);
        assert_eq!(sigmoid(1000.0f32), 1.0);
        assert!((sigmoid(0.0f64) - 0.5).abs() < 1e-15);
    }
}
