//! Dense row-major `f64` tensors.

use rand::Rng;

use crate::error::{ensure_shape, Error, Result};

/// A dense tensor of 64-bit floats stored in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::InvalidArgument(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Tensor with i.i.d. entries drawn uniformly from `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let len = shape.iter().product();
        let data = (0..len).map(|_| rng.gen_range(lo..hi)).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
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

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.data.len() {
            return Err(Error::InvalidArgument(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &n)| {
                debug_assert!(i < n);
                acc * n + i
            })
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        ensure_shape(&self.shape, &other.shape)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, other: &Tensor, alpha: f64) -> Result<()> {
        ensure_shape(&self.shape, &other.shape)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        ensure_shape(&self.shape, &other.shape)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Moves axis 0 to the end: `(C, a, b, ...)` becomes `(a, b, ..., C)`.
    pub fn channels_last(&self) -> Tensor {
        let c = self.shape[0];
        let inner: usize = self.shape[1..].iter().product();
        let mut data = vec![0.0; self.data.len()];
        for ch in 0..c {
            for p in 0..inner {
                data[p * c + ch] = self.data[ch * inner + p];
            }
        }
        let mut shape = self.shape[1..].to_vec();
        shape.push(c);
        Tensor { shape, data }
    }

    /// Inverse of [`Tensor::channels_last`].
    pub fn channels_first(&self) -> Tensor {
        let c = *self.shape.last().expect("tensor has at least one axis");
        let inner: usize = self.shape[..self.shape.len() - 1].iter().product();
        let mut data = vec![0.0; self.data.len()];
        for p in 0..inner {
            for ch in 0..c {
                data[ch * inner + p] = self.data[p * c + ch];
            }
        }
        let mut shape = vec![c];
        shape.extend_from_slice(&self.shape[..self.shape.len() - 1]);
        Tensor { shape, data }
    }
}
