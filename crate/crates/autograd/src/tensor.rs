use std::fmt;
use std::sync::Arc;

use crate::error::{Result, TensorError};

/// Immutable, row-major f64 array.
///
/// Cloning is cheap: the element buffer is shared. Every constructor that
/// accepts raw data rejects NaN and infinities, so a `Tensor` in hand always
/// holds finite values.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    requires_grad: bool,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expected = numel(shape);
        if expected != data.len() {
            return Err(TensorError::ElementCount {
                shape: shape.to_vec(),
                expected,
                got: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "from_data" });
        }
        Ok(Self::from_parts(shape.to_vec(), data))
    }

    /// Internal constructor for buffers whose length and finiteness were
    /// already established by the caller.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor {
            shape,
            data: Arc::new(data),
            requires_grad: false,
        }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(&[n], data)
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Self::new(&[], vec![value])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_parts(shape.to_vec(), vec![0.0; numel(shape)])
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        Self::new(shape, vec![value; numel(shape)])
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.as_ref().clone()
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(TensorError::NonScalar(self.shape.clone()))
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
            requires_grad: self.requires_grad,
        })
    }

    /// Elementwise map; the result is validated for finiteness.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(&self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    /// Elementwise combination of two equally shaped tensors.
    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op: "zip_map",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Self::new(&self.shape, data)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn l1_norm(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Copy of the `index`-th slice along the leading axis.
    pub fn slice_outer(&self, index: usize) -> Result<Self> {
        let (&outer, inner_shape) = self
            .shape
            .split_first()
            .ok_or_else(|| TensorError::invalid("slice_outer", "scalar has no leading axis"))?;
        if index >= outer {
            return Err(TensorError::invalid(
                "slice_outer",
                format!("index {index} out of range for extent {outer}"),
            ));
        }
        let inner = numel(inner_shape);
        let data = self.data[index * inner..(index + 1) * inner].to_vec();
        Ok(Self::from_parts(inner_shape.to_vec(), data))
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| TensorError::invalid("stack", "no tensors to stack"))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(TensorError::ShapeMismatch {
                    op: "stack",
                    lhs: first.shape.clone(),
                    rhs: t.shape.clone(),
                });
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Self::from_parts(shape, data))
    }

    /// Concatenate the flattened contents of several tensors into a vector.
    pub fn concat_flat(items: &[Tensor]) -> Self {
        let data: Vec<f64> = items.iter().flat_map(|t| t.data.iter().copied()).collect();
        let n = data.len();
        Self::from_parts(vec![n], data)
    }

    /// Bitwise equality of shape and contents.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?}[", self.shape)?;
        for (i, v) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v}")?;
        }
        if self.len() > SHOWN {
            write!(f, ", …")?;
        }
        write!(f, "]")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_finite_data() {
        assert_eq!(
            Tensor::vector(vec![1.0, f64::NAN]).unwrap_err(),
            TensorError::NonFinite { op: "from_data" }
        );
        assert!(Tensor::vector(vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn element_count_must_match_shape() {
        let err = Tensor::new(&[2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::ElementCount { expected: 6, got: 5, .. }));
        assert_eq!(Tensor::new(&[2, 0], vec![]).unwrap().len(), 0);
    }

    #[test]
    fn scalar_has_empty_shape() {
        let s = Tensor::scalar(2.5).unwrap();
        assert!(s.shape().is_empty());
        assert_eq!(s.item().unwrap(), 2.5);
    }

    #[test]
    fn stack_and_slice_are_inverse() {
        let a = Tensor::vector(vec![1.0, 2.0]).unwrap();
        let b = Tensor::vector(vec![3.0, 4.0]).unwrap();
        let s = Tensor::stack(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.slice_outer(1).unwrap(), b);
        assert!(s.slice_outer(2).is_err());
    }
}
