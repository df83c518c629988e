//! Dense tensors and a single-shot reverse-mode tape.
//!
//! [`Tensor`] is a plain row-major value. Differentiable computation happens
//! on a [`Tape`]: values are registered as leaves, every operation appends a
//! node, and [`Tape::backward`] walks the nodes in reverse once. A tape is
//! discarded after its backward pass; the next forward builds a fresh one.

mod conv;
mod gradcheck;
mod tape;

pub use conv::ConvSpec;
pub use gradcheck::{finite_difference_check, relative_error};
pub use tape::{Tape, Var};

use crate::error::{config_err, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(config_err!("tensor extents must be positive, got {shape:?}"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(config_err!(
                "shape {shape:?} holds {n} values but {} were given",
                data.len()
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Interpret as `[B, C, H, W]`.
    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape[..] {
            [b, c, h, w] => Ok([b, c, h, w]),
            _ => Err(config_err!("expected a 4-d tensor, got shape {:?}", self.shape)),
        }
    }

    /// Reinterpret the data under a new shape with the same element count.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() || shape.contains(&0) {
            return Err(config_err!("cannot reshape {:?} into {shape:?}", self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Copy of batch items `start..start + count` of a tensor with a leading batch axis.
    pub fn batch_slice(&self, start: usize, count: usize) -> Result<Self> {
        let b = self.shape[0];
        if count == 0 || start + count > b {
            return Err(config_err!("batch range {start}..{} outside 0..{b}", start + count));
        }
        let item = self.data.len() / b;
        let mut shape = self.shape.clone();
        shape[0] = count;
        Ok(Tensor {
            shape,
            data: self.data[start * item..(start + count) * item].to_vec(),
        })
    }

    /// Concatenate tensors along the leading (batch) axis.
    pub fn stack(parts: &[Tensor]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| config_err!("cannot stack an empty list"))?;
        let mut data = Vec::with_capacity(first.len() * parts.len());
        for p in parts {
            if p.shape[1..] != first.shape[1..] {
                return Err(config_err!(
                    "stack: shape {:?} does not match {:?}",
                    p.shape,
                    first.shape
                ));
            }
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = parts.iter().map(|p| p.shape[0]).sum();
        Ok(Tensor { shape, data })
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}
