use std::fmt::{Debug, Display};

use num_traits::{Float, NumAssign};

use crate::error::{CaptError, Result};

/// Scalar element type for the tensor stack. `f32` is the training
/// precision, `f64` the gradient-checking precision.
pub trait Element:
    Float + NumAssign + Debug + Display + Default + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Element for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Plain dense tensor: a shape and a flat row-major buffer.
///
/// This is the at-rest value type (parameters, dataset images). On-tape
/// values are [`crate::tensor::Tensor`].
#[derive(Clone, Debug, PartialEq)]
pub struct TensorData<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> TensorData<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(CaptError::shape(
                "TensorData::new",
                format!("shape {:?} needs {} elements, got {}", shape, numel, data.len()),
            ));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(CaptError::invalid("TensorData::new", format!("zero dim in {:?}", shape)));
        }
        Ok(TensorData { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        TensorData { shape: shape.to_vec(), data: vec![T::zero(); numel] }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let numel = shape.iter().product();
        TensorData { shape: shape.to_vec(), data: vec![v; numel] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel: usize = shape.iter().product();
        TensorData { shape: shape.to_vec(), data: (0..numel).map(|i| f(i)).collect() }
    }

    /// 1-D tensor from a slice of f64 literals (test/setup convenience).
    pub fn vec_from_f64(values: &[f64]) -> Self {
        TensorData {
            shape: vec![values.len()],
            data: values.iter().map(|&v| T::from_f64(v)).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_raw(self) -> (Vec<usize>, Vec<T>) {
        (self.shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        TensorData { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff: shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Cast element type (used by the checkpoint codec and gradcheck setup).
    pub fn cast<U: Element>(&self) -> TensorData<U> {
        TensorData {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_length() {
        assert!(TensorData::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(TensorData::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn new_rejects_zero_dim() {
        assert!(TensorData::<f32>::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn cast_round_trip_exact_for_small_values() {
        let a = TensorData::<f32>::vec_from_f64(&[0.5, -1.25, 3.0]);
        let b: TensorData<f64> = a.cast();
        let c: TensorData<f32> = b.cast();
        assert_eq!(a, c);
    }
}
