//! Minimal deterministic tensor library with reverse-mode autodiff.
//!
//! Values live in flat row-major buffers. A [`Graph`] records every op applied
//! during a forward pass and replays them in reverse to produce gradients.
//! Parameters live outside the graph in a [`ParamStore`] and are bound into
//! each fresh graph by reference-counted handle, so binding never copies.

pub mod checkpoint;
pub mod gradcheck;
mod graph;
pub mod kernels;
mod optim;
mod params;
pub mod probe;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::sync::Arc;

use num_traits::Float;

use crate::error::{Error, Result};

pub use graph::{Graph, NormUpdate, Var};
pub use optim::{sgd_step, Sgd, SgdConfig};
pub use params::{NormId, NormState, ParamId, ParamStore, BN_EPS, BN_MOMENTUM};

/// Floating-point precision of a computation graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Single,
    Double,
}

impl std::str::FromStr for Precision {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" | "f32" => Ok(Precision::Single),
            "double" | "f64" => Ok(Precision::Double),
            other => Err(Error::Config(format!("unknown precision {other:?} (expected single|double)"))),
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Precision::Single => "single",
            Precision::Double => "double",
        })
    }
}

/// Element type of a tensor. Precision is a type parameter, so it is fixed
/// for the lifetime of any graph built over it.
pub trait Scalar:
    Float + Sum + Send + Sync + Debug + Display + Default + 'static
{
    const PRECISION: Precision;
    /// Stand-in for negative infinity in masked attention scores.
    const NEG_SENTINEL: Self;

    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    const PRECISION: Precision = Precision::Single;
    const NEG_SENTINEL: Self = -1e9;
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const PRECISION: Precision = Precision::Double;
    const NEG_SENTINEL: Self = -1e9;
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Returns true when `x` encodes a masked attention position.
#[inline]
pub fn is_masked<T: Scalar>(x: T) -> bool {
    x <= T::NEG_SENTINEL
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// An n-dimensional array with an optional gradient buffer.
#[derive(Clone)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.contains(&0) {
            return Err(Error::dim("tensor", format!("zero-sized dimension in {shape:?}")));
        }
        if numel(&shape) != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {shape:?} needs {} values, got {}", numel(&shape), data.len()),
            ));
        }
        Ok(Tensor { shape, data: Arc::new(data), grad: None, requires_grad: false })
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| T::of(x)).collect())
    }

    pub(crate) fn from_arc(shape: Vec<usize>, data: Arc<Vec<T>>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor { shape, data, grad: None, requires_grad: false }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Tensor { shape, data: Arc::new(vec![T::zero(); n]), grad: None, requires_grad: false }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Tensor { shape, data: Arc::new(vec![value; n]), grad: None, requires_grad: false }
    }

    pub fn scalar(value: T) -> Self {
        Self::full(vec![1], value)
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub(crate) fn data_arc(&self) -> &Arc<Vec<T>> {
        &self.data
    }

    /// Mutable access; copies the buffer first if a graph still shares it.
    pub fn data_mut(&mut self) -> &mut Vec<T> {
        Arc::make_mut(&mut self.data)
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> &mut Vec<T> {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![T::zero(); n])
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|x| *x = T::zero());
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.as_f64()).collect()
    }

    /// Converts to another precision.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|x| U::of(x.as_f64())).collect()),
            grad: None,
            requires_grad: self.requires_grad,
        }
    }

    pub fn reshaped(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != self.numel() {
            return Err(Error::dim("reshape", format!("{:?} -> {shape:?}", self.shape)));
        }
        Ok(Tensor::from_arc(shape, self.data.clone()))
    }

    /// Element at a multi-index.
    pub fn at(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.shape.len());
        let mut off = 0;
        for (i, (&ix, &d)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < d, "index {ix} out of range for axis {i} of size {d}");
            off = off * d + ix;
        }
        self.data[off]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl<T: Scalar> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        write!(f, "Tensor{:?} {:?}{}", self.shape, preview, if self.numel() > 8 { " .." } else { "" })
    }
}

/// Boolean mask with the same shape as the tensor it applies to.
/// `true` marks a position that stays visible.
#[derive(Clone, Debug)]
pub struct Mask {
    shape: Vec<usize>,
    keep: Arc<Vec<bool>>,
}

impl Mask {
    pub fn new(shape: impl Into<Vec<usize>>, keep: Vec<bool>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != keep.len() {
            return Err(Error::dim("mask", format!("shape {shape:?} vs {} flags", keep.len())));
        }
        Ok(Mask { shape, keep: Arc::new(keep) })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    /// Expands a mask whose dims are either equal to `target` or 1.
    pub fn broadcast_to(&self, target: &[usize]) -> Result<Mask> {
        if self.shape == target {
            return Ok(self.clone());
        }
        if self.shape.len() != target.len()
            || self.shape.iter().zip(target).any(|(&s, &t)| s != t && s != 1)
        {
            return Err(Error::dim("mask", format!("cannot broadcast {:?} to {target:?}", self.shape)));
        }
        let rank = target.len();
        let mut src_strides = vec![0; rank];
        let mut acc = 1;
        for i in (0..rank).rev() {
            src_strides[i] = if self.shape[i] == 1 { 0 } else { acc };
            acc *= self.shape[i];
        }
        let n = numel(target);
        let mut out = Vec::with_capacity(n);
        let mut idx = vec![0usize; rank];
        for _ in 0..n {
            let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
            out.push(self.keep[off]);
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                if idx[ax] < target[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        Mask::new(target.to_vec(), out)
    }

    /// Lower-triangular mask `[t, t]`: query step i sees key steps 0..=i.
    pub fn causal(t: usize) -> Mask {
        let keep = (0..t * t).map(|k| k % t <= k / t).collect();
        Mask { shape: vec![t, t], keep: Arc::new(keep) }
    }
}
