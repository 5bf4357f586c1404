//! Dense n-dimensional arrays in row-major order.
//!
//! `Tensor` is the universal value type of the workspace: data samples,
//! network activations, parameters, and gradients all use it. A rank-0
//! tensor (empty shape) holds exactly one element.

use crate::dtype::{DType, Element};
use crate::error::{CoreError, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor<E> {
    shape: Vec<usize>,
    data: Vec<E>,
}

pub fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<E: Element> Tensor<E> {
    /// Build a tensor from raw parts, checking the length invariant.
    pub fn from_vec(shape: &[usize], data: Vec<E>) -> Result<Self> {
        if numel_of(shape) != data.len() {
            return Err(CoreError::InvalidShape {
                shape: shape.to_vec(),
                reason: format!(
                    "data length {} does not match shape product {}",
                    data.len(),
                    numel_of(shape)
                ),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![E::zero(); numel_of(shape)],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor::full(shape, E::one())
    }

    pub fn full(shape: &[usize], value: E) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel_of(shape)],
        }
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(value: E) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn scalar_f64(value: f64) -> Self {
        Tensor::scalar(E::from_f64(value))
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> E) -> Self {
        let n = numel_of(shape);
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(|i| f(i)).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn dtype(&self) -> DType {
        E::DTYPE
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    /// Value of a rank-0 or single-element tensor.
    pub fn item(&self) -> E {
        assert_eq!(self.numel(), 1, "item() requires exactly one element");
        self.data[0]
    }

    pub fn item_f64(&self) -> f64 {
        self.item().as_f64()
    }

    /// Reinterpret the data under a new shape with the same element count.
    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        if numel_of(shape) != self.data.len() {
            return Err(CoreError::InvalidShape {
                shape: shape.to_vec(),
                reason: format!("cannot reshape {} elements", self.data.len()),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination of two same-shape tensors.
    pub fn zip_map(&self, other: &Self, f: impl Fn(E, E) -> E) -> Result<Self> {
        if self.shape != other.shape {
            return Err(CoreError::ShapeMismatch {
                context: "zip_map".into(),
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn scale(&self, c: f64) -> Self {
        let c = E::from_f64(c);
        self.map(|v| v * c)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<F: Element>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| F::from_f64(v.as_f64())).collect(),
        }
    }

    /// Mean of all elements as f64 (0 for empty tensors).
    pub fn mean_f64(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|v| v.as_f64()).sum::<f64>() / self.data.len() as f64
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[E] {
        assert_eq!(self.rank(), 2, "row() requires rank 2");
        let w = self.shape[1];
        &self.data[i * w..(i + 1) * w]
    }
}

impl<E: Element> std::fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor<{}>{:?}", E::DTYPE, self.shape)?;
        if self.numel() <= 8 {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " [{:?}, {:?}, ...]", self.data[0], self.data[1])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn length_invariant_enforced() {
        let err = Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 5]);
        assert!(err.is_err());
        let ok = Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 6]);
        assert!(ok.is_ok());
    }

    #[test]
    fn rank0_scalar_holds_one_element() {
        let t = Tensor::<f64>::scalar(4.5);
        assert_eq!(t.rank(), 0);
        assert_eq!(t.numel(), 1);
        assert_eq!(t.item(), 4.5);
    }

    #[test]
    fn cast_roundtrip_preserves_f32_values() {
        let t = Tensor::<f32>::from_vec(&[3], vec![1.5, -2.25, 0.125]).unwrap();
        let back: Tensor<f32> = t.cast::<f64>().cast();
        assert_eq!(t, back);
    }
}
