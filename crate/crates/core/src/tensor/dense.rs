use crate::error::{Error, Result};

use super::{Scalar, Shape};

/// Dense row-major array with shape metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(dims: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        Self::from_shape(shape, data)
    }

    pub fn from_shape(shape: Shape, data: Vec<T>) -> Result<Self> {
        if shape.numel() != data.len() {
            return Err(Error::InvalidArgument(format!(
                "shape {shape} holds {} values, got {}",
                shape.numel(),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn full(dims: impl Into<Vec<usize>>, value: T) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let data = vec![value; shape.numel()];
        Ok(Tensor { shape, data })
    }

    pub fn zeros(dims: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(dims, T::zero())
    }

    pub fn ones(dims: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(dims, T::one())
    }

    pub fn zeros_like(other: &Tensor<T>) -> Self {
        Tensor {
            shape: other.shape.clone(),
            data: vec![T::zero(); other.data.len()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Shape::scalar(),
            data: vec![value],
        }
    }

    pub fn from_f64(dims: impl Into<Vec<usize>>, values: &[f64]) -> Result<Self> {
        Self::new(dims, values.iter().map(|&v| T::of(v)).collect())
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "item() on tensor of shape {}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn reshape(self, dims: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(dims, self.data)
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

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum_all(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// In-place `self += other`; shapes must agree.
    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape("add_assign", self.dims(), other.dims()));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn length_must_match_shape() {
        assert!(Tensor::<f32>::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 2], vec![1.0; 4]).is_ok());
    }

    #[test]
    fn item_requires_single_element() {
        assert_eq!(Tensor::scalar(3.0f64).item().unwrap(), 3.0);
        assert!(Tensor::<f64>::zeros(vec![2]).unwrap().item().is_err());
    }
}
