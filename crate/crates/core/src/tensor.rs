//! Dense row-major `f32` tensors.

use rand::Rng;

use crate::error::{Error, Result};

/// An N-dimensional array of `f32` in row-major order.
///
/// Every dimension is at least 1, so a scalar is a tensor of shape `[1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    strides: Vec<usize>,
    data: Vec<f32>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::ZeroDim(shape.to_vec()));
    }
    Ok(shape.iter().product())
}

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let numel = check_shape(shape)?;
        if data.len() != numel {
            return Err(Error::DimMismatch(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape: shape.to_vec(), strides: row_major_strides(shape), data })
    }

    pub fn full(shape: &[usize], value: f32) -> Result<Self> {
        let numel = check_shape(shape)?;
        Self::new(shape, vec![value; numel])
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn scalar(value: f32) -> Self {
        Self { shape: vec![1], strides: vec![1], data: vec![value] }
    }

    /// Uniform samples in `[low, high)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], low: f32, high: f32, rng: &mut R) -> Result<Self> {
        let numel = check_shape(shape)?;
        let data = (0..numel).map(|_| rng.gen_range(low..high)).collect();
        Self::new(shape, data)
    }

    pub fn eye(n: usize) -> Result<Self> {
        let mut t = Self::zeros(&[n, n])?;
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        Ok(t)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
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

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f32> {
        if self.data.len() != 1 {
            return Err(Error::NotScalar(self.shape.clone()));
        }
        Ok(self.data[0])
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index.iter().zip(&self.strides).map(|(i, s)| i * s).sum()
    }

    pub fn get(&self, index: &[usize]) -> f32 {
        self.data[self.offset(index)]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        self.clone().into_reshape(shape)
    }

    pub fn into_reshape(self, shape: &[usize]) -> Result<Self> {
        let numel = check_shape(shape)?;
        if numel != self.data.len() {
            return Err(Error::DimMismatch(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Self { shape: shape.to_vec(), strides: row_major_strides(shape), data: self.data })
    }

    /// Copy of sample `n` along the leading axis, keeping a leading dim of 1.
    pub fn select_batch(&self, n: usize) -> Result<Self> {
        let per = self.data.len() / self.shape[0];
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Self::new(&shape, self.data[n * per..(n + 1) * per].to_vec())
    }

    /// Stack equally-shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidArgument("cannot stack zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::DimMismatch(format!("stack {:?} with {:?}", first.shape, t.shape)));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Self::new(&shape, data)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self { shape: self.shape.clone(), strides: self.strides.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Largest absolute elementwise difference; shapes must agree.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        if self.shape != other.shape {
            return Err(Error::DimMismatch(format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max))
    }
}
