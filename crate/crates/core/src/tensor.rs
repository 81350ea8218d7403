//! Dense row-major tensor values.
//!
//! A [`TensorValue`] is a shape plus a flat buffer. Values are treated as
//! immutable once constructed: primitives always allocate fresh outputs, so a
//! value can be shared across worker threads without locking.

use crate::element::Element;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TensorValue<E: Element> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Element> TensorValue<E> {
    /// Build from an explicit shape and row-major data buffer.
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} wants {expect} elements, got {}", data.len()),
            ));
        }
        Ok(TensorValue { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        TensorValue {
            shape,
            data: vec![E::zero(); n],
        }
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        TensorValue {
            shape,
            data: vec![E::one(); n],
        }
    }

    pub fn scalar(x: E) -> Self {
        TensorValue {
            shape: vec![1],
            data: vec![x],
        }
    }

    /// 1-D vector.
    pub fn vector(data: Vec<E>) -> Self {
        TensorValue {
            shape: vec![data.len()],
            data,
        }
    }

    /// 2-D matrix from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<E>) -> Result<Self> {
        TensorValue::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows / row width when viewed as 2-D (a 1-D tensor is one row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 0,
            1 => self.shape[0],
            _ => self.shape[1],
        }
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> E {
        debug_assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    /// True when every entry is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Convert elementwise into another element type (used by the
    /// double-precision oracle suites).
    pub fn cast<T: Element>(&self) -> TensorValue<T> {
        TensorValue {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| T::from_f64(x.as_f64())).collect(),
        }
    }
}
