//! Dense n-dimensional 32-bit float arrays in row-major layout.
//!
//! `Tensor` is a plain value type. Gradients are not stored here; they live
//! on the [`crate::tape::Tape`] a tensor is registered with. The
//! `requires_grad` flag only marks intent: when a tensor becomes a tape leaf,
//! the flag decides whether a gradient accumulator is attached.

use crate::error::{Error, Result};
use rand::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
}

impl Tensor {
    /// Builds a tensor, rejecting zero extents and element-count mismatches.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&e| e == 0) {
            return Err(Error::Shape(format!(
                "shape {:?} must be a non-empty list of positive extents",
                shape
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements but {} were supplied",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data, requires_grad: false })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        assert!(!shape.is_empty() && numel > 0, "zeros() needs positive extents");
        Tensor { shape, data: vec![0.0; numel], requires_grad: false }
    }

    pub fn filled(shape: Vec<usize>, value: f32) -> Self {
        let mut t = Tensor::zeros(shape);
        t.data.iter_mut().for_each(|x| *x = value);
        t
    }

    pub fn scalar(value: f32) -> Self {
        Tensor { shape: vec![1], data: vec![value], requires_grad: false }
    }

    pub fn vector(data: Vec<f32>) -> Self {
        assert!(!data.is_empty(), "vector() needs at least one element");
        Tensor { shape: vec![data.len()], data, requires_grad: false }
    }

    /// Uniform fill over [lo, hi) from the caller's RNG; used by initializers.
    pub fn uniform<R: Rng>(shape: Vec<usize>, lo: f32, hi: f32, rng: &mut R) -> Self {
        let mut t = Tensor::zeros(shape);
        for x in t.data.iter_mut() {
            *x = lo + (hi - lo) * rng.gen::<f32>();
        }
        t
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
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

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Same data under a new shape with identical element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || numel != self.numel() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} ({} elements) to {:?} ({} elements)",
                self.shape,
                self.numel(),
                shape,
                numel
            )));
        }
        Tensor::new(shape, self.data.clone())
    }
}
