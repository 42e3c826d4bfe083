//! Dense row-major value tensors (no gradients; see [`crate::graph`] for autodiff).

use crate::scalar::Scalar;

/// A dense row-major tensor. Images are stored as `[batch, height, width, channel]`
/// so that the innermost (channel) axis is contiguous for im2col.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "tensor shape {:?} needs {} elements, got {}",
            shape,
            numel,
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![S::zero(); numel] }
    }

    pub fn full(shape: Vec<usize>, value: S) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![value; numel] }
    }

    /// A rank-1 tensor holding a single value (graph scalars use this shape).
    pub fn scalar(value: S) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn from_f64(shape: Vec<usize>, values: &[f64]) -> Self {
        Tensor::new(shape, values.iter().map(|&v| S::of(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// The single element of a rank-1 one-element tensor.
    pub fn item(&self) -> S {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshape(mut self, shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, self.data.len(), "reshape {:?} -> {:?}", self.shape, shape);
        self.shape = shape;
        self
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stacks rank-matching tensors along a new-less axis 0 (concatenation of rows/batches).
    pub fn concat_rows(parts: &[&Tensor<S>]) -> Self {
        assert!(!parts.is_empty());
        let tail = &parts[0].shape[1..];
        let mut rows = 0;
        for p in parts {
            assert_eq!(&p.shape[1..], tail, "concat_rows with mismatched trailing shape");
            rows += p.shape[0];
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(tail);
        let mut data = Vec::with_capacity(shape.iter().product());
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Tensor { shape, data }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_element_count() {
        let t = Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]);
        assert_eq!(t.numel(), 6);
        assert_eq!(t.shape(), &[2, 3]);
    }

    #[test]
    #[should_panic(expected = "needs 6 elements")]
    fn new_rejects_wrong_length() {
        let _ = Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]);
    }

    #[test]
    fn concat_rows_stacks_batches() {
        let a = Tensor::<f64>::from_f64(vec![1, 2], &[1.0, 2.0]);
        let b = Tensor::<f64>::from_f64(vec![2, 2], &[3.0, 4.0, 5.0, 6.0]);
        let c = Tensor::concat_rows(&[&a, &b]);
        assert_eq!(c.shape(), &[3, 2]);
        assert_eq!(c.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn scalar_item() {
        let t = Tensor::<f32>::scalar(2.5);
        assert_eq!(t.item(), 2.5);
        assert_eq!(t.shape(), &[1]);
    }
}
