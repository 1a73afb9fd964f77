//! Dense tensors over flat row-major buffers, generic over `f32`/`f64`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scalar type for all numerics in the crate. Tests and gradient checks run
/// in `f64`; experiments may opt into `f32`.
pub trait Real:
    num_traits::Float
    + std::fmt::Debug
    + std::fmt::Display
    + std::str::FromStr
    + std::iter::Sum
    + Serialize
    + DeserializeOwned
    + Send
    + Sync
    + 'static
{
    /// Precision tag written into checkpoints ("f32" or "f64").
    const NAME: &'static str;

    fn of_f64(v: f64) -> Self;
    fn of_usize(n: usize) -> Self;
    fn as_f64(self) -> f64;
    fn sample_uniform<R: Rng + ?Sized>(rng: &mut R, lo: Self, hi: Self) -> Self;
    fn sample_standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;
}

impl Real for f32 {
    const NAME: &'static str = "f32";

    fn of_f64(v: f64) -> Self {
        v as f32
    }

    fn of_usize(n: usize) -> Self {
        n as f32
    }

    fn as_f64(self) -> f64 {
        f64::from(self)
    }

    fn sample_uniform<R: Rng + ?Sized>(rng: &mut R, lo: Self, hi: Self) -> Self {
        rng.random_range(lo..hi)
    }

    fn sample_standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
}

impl Real for f64 {
    const NAME: &'static str = "f64";

    fn of_f64(v: f64) -> Self {
        v
    }

    fn of_usize(n: usize) -> Self {
        n as f64
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn sample_uniform<R: Rng + ?Sized>(rng: &mut R, lo: Self, hi: Self) -> Self {
        rng.random_range(lo..hi)
    }

    fn sample_standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
}

/// A dense tensor. `values` is row-major; invariant: `shape` product equals
/// `values.len()` and tensors are never empty.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    values: Vec<T>,
    requires_grad: bool,
    /// Populated by the training loop after backward; not persisted.
    grad: Option<Vec<T>>,
}

/// Wire format: shape/values/requires_grad only. Deserialization re-checks
/// the shape invariant so corrupted files never build an invalid tensor.
#[derive(Serialize, Deserialize)]
struct TensorRepr<T> {
    shape: Vec<usize>,
    values: Vec<T>,
    requires_grad: bool,
}

impl<T: Real> Serialize for Tensor<T> {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        TensorRepr {
            shape: self.shape.clone(),
            values: self.values.clone(),
            requires_grad: self.requires_grad,
        }
        .serialize(serializer)
    }
}

impl<'de, T: Real> Deserialize<'de> for Tensor<T> {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let repr = TensorRepr::<T>::deserialize(deserializer)?;
        let mut t = Tensor::new(repr.shape, repr.values).map_err(serde::de::Error::custom)?;
        t.requires_grad = repr.requires_grad;
        Ok(t)
    }
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, values: Vec<T>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != values.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} implies {expect} values, got {}",
                values.len()
            )));
        }
        if values.is_empty() {
            return Err(Error::Shape("empty tensor".into()));
        }
        Ok(Tensor { shape, values, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        Self::new(shape, vec![T::zero(); n])
    }

    pub fn scalar(v: T) -> Self {
        Tensor { shape: vec![1], values: vec![v], requires_grad: false, grad: None }
    }

    /// Builds a 2-D tensor from equally sized rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<T>) -> Result<()> {
        if grad.len() != self.values.len() {
            return Err(Error::Shape(format!(
                "gradient length {} does not match tensor length {}",
                grad.len(),
                self.values.len()
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Casts every value; used when moving generated `f64` data into an
    /// `f32` experiment.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            values: self.values.iter().map(|v| U::of_f64(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_product_must_match() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn from_rows_rejects_ragged() {
        assert!(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0]]).is_err());
        let t = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(t.shape(), &[2, 2]);
        assert_eq!(t.values(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn grad_length_checked() {
        let mut t = Tensor::<f64>::zeros(vec![3]).unwrap();
        assert!(t.set_grad(vec![1.0, 2.0]).is_err());
        assert!(t.set_grad(vec![1.0, 2.0, 3.0]).is_ok());
        assert_eq!(t.grad().unwrap(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn serde_skips_grad() {
        let mut t = Tensor::<f64>::new(vec![2], vec![0.25, -1.5]).unwrap().with_grad();
        t.set_grad(vec![1.0, 1.0]).unwrap();
        let json = serde_json::to_string(&t).unwrap();
        let back: Tensor<f64> = serde_json::from_str(&json).unwrap();
        assert_eq!(back.values(), t.values());
        assert!(back.requires_grad());
        assert!(back.grad().is_none());
    }
}
