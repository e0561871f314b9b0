//! Dense row-major n-dimensional array, the universal value type.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};

/// Dense tensor with explicit shape and flat row-major storage.
///
/// `grad_tracked` marks whether the tensor should participate in reverse-mode
/// differentiation when bound to a tape as a leaf.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
    pub grad_tracked: bool,
}

fn checked_numel(shape: &[usize]) -> Result<usize> {
    let mut n: usize = 1;
    for &e in shape {
        if e == 0 {
            return Err(Error::InvalidShape(format!(
                "zero extent in shape {shape:?}"
            )));
        }
        n = n
            .checked_mul(e)
            .ok_or_else(|| Error::InvalidShape(format!("shape {shape:?} overflows usize")))?;
    }
    Ok(n)
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n = checked_numel(&shape)?;
        if n != data.len() {
            return Err(Error::InvalidShape(format!(
                "shape {shape:?} implies {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            grad_tracked: false,
        })
    }

    pub fn full(shape: Vec<usize>, value: T) -> Result<Self> {
        let n = checked_numel(&shape)?;
        Ok(Self {
            shape,
            data: vec![value; n],
            grad_tracked: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: Vec<usize>) -> Result<Self> {
        Self::full(shape, T::one())
    }

    /// Rank-0 scalar wrapper (shape `[1]`).
    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            grad_tracked: false,
        }
    }

    /// Uniform fill over `(-bound, bound)`, sampled in f64 then narrowed.
    pub fn uniform<R: Rng>(shape: Vec<usize>, bound: f64, rng: &mut R) -> Result<Self> {
        let n = checked_numel(&shape)?;
        let data = (0..n)
            .map(|_| lit(rng.gen_range(-bound..bound)))
            .collect();
        Ok(Self {
            shape,
            data,
            grad_tracked: false,
        })
    }

    /// Standard-normal fill, sampled in f64 then narrowed.
    pub fn randn<R: Rng>(shape: Vec<usize>, rng: &mut R) -> Result<Self> {
        let n = checked_numel(&shape)?;
        let data = (0..n)
            .map(|_| {
                let v: f64 = rng.sample(StandardNormal);
                lit(v)
            })
            .collect();
        Ok(Self {
            shape,
            data,
            grad_tracked: false,
        })
    }

    pub fn tracked(mut self) -> Self {
        self.grad_tracked = true;
        self
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row-major strides for the current shape.
    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    pub fn at(&self, idx: &[usize]) -> T {
        self.data[flat_index(&self.shape, idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: T) {
        let i = flat_index(&self.shape, idx);
        self.data[i] = value;
    }

    /// Same data under a new shape; element count must match.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        let n = checked_numel(&shape)?;
        if n != self.data.len() {
            return Err(Error::InvalidShape(format!(
                "cannot reshape {:?} ({} elements) to {shape:?} ({n} elements)",
                self.shape,
                self.data.len()
            )));
        }
        Ok(Self {
            shape,
            data: self.data.clone(),
            grad_tracked: self.grad_tracked,
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad_tracked: false,
        }
    }

    /// Convert element type (used by the f64 gradient-oracle tests).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap()).unwrap())
                .collect(),
            grad_tracked: self.grad_tracked,
        }
    }
}

pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub fn flat_index(shape: &[usize], idx: &[usize]) -> usize {
    debug_assert_eq!(shape.len(), idx.len());
    let mut flat = 0;
    let mut stride = 1;
    for d in (0..shape.len()).rev() {
        debug_assert!(idx[d] < shape[d]);
        flat += idx[d] * stride;
        stride *= shape[d];
    }
    flat
}
