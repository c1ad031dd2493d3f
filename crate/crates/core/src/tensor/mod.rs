//! Dense f32 tensors and a tape-based reverse-mode differentiation engine.
//!
//! [`Tensor`] is a plain value: a shape and a row-major buffer. Gradient
//! tracking lives in [`Graph`], which records every operation applied to
//! its nodes so that [`Graph::backward`] can replay them in reverse.

mod adam;
mod graph;
pub mod io;
pub(crate) mod ops;

pub use adam::{Adam, AdamConfig};
pub use graph::{Graph, Var};
pub use ops::{Conv2dSpec, Padding, PoolSpec};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{dim_err, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor, checking that the shape matches the buffer and that
    /// every value is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return dim_err(format!("shape {shape:?} must be non-empty with positive dims"));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return dim_err(format!("shape {shape:?} holds {numel} values but buffer has {}", data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tensor construction".into()));
        }
        Ok(Tensor { shape, data })
    }

    /// Internal constructor for buffers already known to be consistent.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor::full(shape, 1.0)
    }

    pub fn scalar(value: f32) -> Self {
        Tensor::from_parts(vec![1], vec![value])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), (0..n).map(&mut f).collect())
    }

    /// Normal(0, std) samples.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f32, rng: &mut R) -> Self {
        let normal = Normal::new(0.0f32, std.max(f32::MIN_POSITIVE)).expect("valid std");
        Tensor::from_fn(shape, |_| normal.sample(rng))
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn rand_uniform<R: Rng + ?Sized>(shape: &[usize], lo: f32, hi: f32, rng: &mut R) -> Self {
        Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// First element; convenient for scalar losses.
    pub fn item(&self) -> f32 {
        self.data[0]
    }

    /// Shape as `(N, C, H, W)`; errors for anything other than rank 4.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => dim_err(format!("expected rank-4 tensor, got {:?}", self.shape)),
        }
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [a, b] => Ok((a, b)),
            _ => dim_err(format!("expected rank-2 tensor, got {:?}", self.shape)),
        }
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() || shape.contains(&0) {
            return dim_err(format!("cannot reshape {:?} to {shape:?}", self.shape));
        }
        Ok(Tensor::from_parts(shape.to_vec(), self.data))
    }

    /// Elementwise map, result checked for finiteness.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Self> {
        Tensor::new(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    /// Largest absolute elementwise difference; shapes must agree.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        if self.shape != other.shape {
            return dim_err(format!("{:?} vs {:?}", self.shape, other.shape));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[&Tensor]) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::Dimension("cannot stack zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return dim_err(format!("stack: {:?} vs {:?}", t.shape, first.shape));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor::from_parts(shape, data))
    }

    /// Slice `index` along the leading axis.
    pub fn index_first(&self, index: usize) -> Result<Self> {
        let lead = self.shape[0];
        if index >= lead {
            return dim_err(format!("index {index} out of range for leading dim {lead}"));
        }
        let inner: usize = self.shape[1..].iter().product();
        let shape = if self.shape.len() == 1 { vec![1] } else { self.shape[1..].to_vec() };
        Ok(Tensor::from_parts(shape, self.data[index * inner..(index + 1) * inner].to_vec()))
    }

    /// Cyclic shift of a `[.., H, W]` tensor by `shift` rows (positive moves
    /// content towards higher row indices).
    pub fn roll_rows(&self, shift: isize) -> Result<Self> {
        let rank = self.shape.len();
        if rank < 2 {
            return dim_err("roll_rows needs rank >= 2");
        }
        let (h, w) = (self.shape[rank - 2], self.shape[rank - 1]);
        let planes = self.numel() / (h * w);
        let s = shift.rem_euclid(h as isize) as usize;
        let mut out = vec![0.0; self.numel()];
        for p in 0..planes {
            let base = p * h * w;
            for y in 0..h {
                let dst = base + ((y + s) % h) * w;
                out[dst..dst + w].copy_from_slice(&self.data[base + y * w..base + (y + 1) * w]);
            }
        }
        Ok(Tensor::from_parts(self.shape.clone(), out))
    }
}
