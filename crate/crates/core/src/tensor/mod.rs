//! Dense row-major tensors and the fixed set of differentiable primitives the
//! denoising networks are built from.
//!
//! Everything is generic over [`Real`] so the same code runs in `f32` for
//! training and inference and in `f64` for finite-difference verification.

mod conv;
pub mod gradcheck;
mod norm;
mod optim;
mod param;
pub mod pct;
mod pointwise;

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

pub use conv::{conv2d, conv2d_backward, conv3d, conv3d_backward, Conv2dGrads, Conv3dGrads};
pub(crate) use conv::{grouped_conv2d_backward, grouped_conv2d_forward, ConvGeom};
pub use norm::{batchnorm, batchnorm_backward, BatchNormCache, BnMode, RunningStats, BN_EPS};
pub use optim::{optimizer_step, OptimizerSpec};
pub use param::{ParamBank, ParamEntry, ParamId};
pub use pointwise::{lrelu, lrelu_backward, mse_loss, relu, relu_backward, DEFAULT_LRELU_SLOPE};

/// Floating-point element type. Implemented for `f32` and `f64`.
pub trait Real: Float + FromPrimitive + ToPrimitive + Sum + Default + Debug + Send + Sync + 'static {
    fn of(x: f64) -> Self;
    fn f64(self) -> f64;
}

impl Real for f32 {
    #[inline(always)]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline(always)]
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline(always)]
    fn of(x: f64) -> Self {
        x
    }
    #[inline(always)]
    fn f64(self) -> f64 {
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape("tensor", format!("zero-sized dimension in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} holds {n} elements, data has {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::of(x.f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_shape(op, other.shape())?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|x| x * k)
    }

    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|x| x.f64()).sum()
    }

    pub fn norm_f64(&self) -> f64 {
        self.data
            .iter()
            .map(|x| {
                let v = x.f64();
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.f64() - b.f64()).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn expect_shape(&self, op: &'static str, shape: &[usize]) -> Result<()> {
        if self.shape != shape {
            return Err(Error::shape(op, format!("expected {shape:?}, got {:?}", self.shape)));
        }
        Ok(())
    }

    pub(crate) fn expect_rank(&self, op: &'static str, rank: usize) -> Result<()> {
        if self.shape.len() != rank {
            return Err(Error::shape(
                op,
                format!("expected rank {rank}, got shape {:?}", self.shape),
            ));
        }
        Ok(())
    }

    /// Sub-tensor at `index` along the leading axis.
    pub fn index_axis0(&self, index: usize) -> Result<Self> {
        let lead = *self.shape.first().unwrap_or(&0);
        if index >= lead || self.shape.len() < 2 {
            return Err(Error::shape(
                "index_axis0",
                format!("index {index} out of range for {:?}", self.shape),
            ));
        }
        let inner: usize = self.shape[1..].iter().product();
        Ok(Self {
            shape: self.shape[1..].to_vec(),
            data: self.data[index * inner..(index + 1) * inner].to_vec(),
        })
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::shape("stack", "no tensors to stack"))?;
        let mut shape = vec![items.len()];
        shape.extend_from_slice(first.shape());
        let mut data = Vec::with_capacity(first.len() * items.len());
        for (i, t) in items.iter().enumerate() {
            if t.shape != first.shape {
                return Err(Error::shape(
                    "stack",
                    format!("item {i} has shape {:?}, item 0 {:?}", t.shape, first.shape),
                ));
            }
            data.extend_from_slice(&t.data);
        }
        Ok(Self { shape, data })
    }

    /// Crops the two trailing (spatial) axes to `[y0, y0+h) × [x0, x0+w)`.
    pub fn crop_spatial(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        let r = self.rank();
        if r < 2 {
            return Err(Error::shape("crop_spatial", "rank < 2"));
        }
        let (sh, sw) = (self.shape[r - 2], self.shape[r - 1]);
        if y0 + h > sh || x0 + w > sw || h == 0 || w == 0 {
            return Err(Error::shape(
                "crop_spatial",
                format!("window {h}x{w} at ({y0},{x0}) exceeds spatial dims {sh}x{sw}"),
            ));
        }
        let outer: usize = self.shape[..r - 2].iter().product();
        let mut data = Vec::with_capacity(outer * h * w);
        for o in 0..outer {
            let plane = &self.data[o * sh * sw..(o + 1) * sh * sw];
            for y in y0..y0 + h {
                data.extend_from_slice(&plane[y * sw + x0..y * sw + x0 + w]);
            }
        }
        let mut shape = self.shape.clone();
        shape[r - 2] = h;
        shape[r - 1] = w;
        Ok(Self { shape, data })
    }
}
