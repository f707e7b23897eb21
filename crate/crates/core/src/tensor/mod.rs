//! Dense n-dimensional arrays, reverse-mode autodiff, parameter storage and
//! the optimizer. Everything is row-major `Vec<T>` with explicit shapes; no
//! external numeric backend.

mod graph;
mod ops;
mod optim;
mod params;

pub use graph::{Graph, NodeId};
pub use ops::*;
pub use optim::{CosineSchedule, OptimConfig, OptimState};
pub use params::{ParamStore, Parameter};

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Element types the numeric stack accepts. `f32` is the working dtype for
/// training; `f64` exists for oracle tests and gradient checks.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Dtype tag written into model files (0 = f32, 1 = f64).
    const DTYPE: u8;

    fn from_f64_val(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("f64 conversion")
    }

    fn to_f64_val(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).expect("f64 conversion")
    }
}

impl Scalar for f32 {
    const DTYPE: u8 = 0;
}

impl Scalar for f64 {
    const DTYPE: u8 = 1;
}

/// A dense row-major tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    /// A tensor filled with zeros.
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![T::zero(); n] }
    }

    /// A tensor from existing data; the element count must match the shape.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::DimensionMismatch {
                op: "from_vec",
                detail: format!("shape {:?} wants {} elements, got {}", shape, n, data.len()),
            });
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    /// A scalar (rank-0) tensor.
    pub fn scalar(x: T) -> Self {
        Tensor { shape: vec![], data: vec![x] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single element of a rank-0 or single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::DimensionMismatch {
                op: "item",
                detail: format!("expected 1 element, tensor has {}", self.data.len()),
            });
        }
        Ok(self.data[0])
    }

    /// Reinterpret the data under a new shape with the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Tensor::from_vec(shape, self.data.clone())
    }

    /// Copy a rectangular region. `ranges` gives [start, end) per dimension
    /// and must cover every dimension of the tensor.
    pub fn slice(&self, ranges: &[std::ops::Range<usize>]) -> Result<Self> {
        if ranges.len() != self.shape.len() {
            return Err(Error::DimensionMismatch {
                op: "slice",
                detail: format!("{} ranges for rank-{} tensor", ranges.len(), self.shape.len()),
            });
        }
        for (d, r) in ranges.iter().enumerate() {
            if r.start > r.end || r.end > self.shape[d] {
                return Err(Error::IndexOutOfRange {
                    what: "slice range",
                    index: r.end,
                    size: self.shape[d],
                });
            }
        }
        let out_shape: Vec<usize> = ranges.iter().map(|r| r.end - r.start).collect();
        let mut out = Tensor::zeros(&out_shape);
        if out.data.is_empty() {
            return Ok(out);
        }
        // Iterate output coordinates in row-major order, mapping each back to
        // the source offset.
        let rank = self.shape.len();
        let mut src_strides = vec![1usize; rank];
        for d in (0..rank.saturating_sub(1)).rev() {
            src_strides[d] = src_strides[d + 1] * self.shape[d + 1];
        }
        let mut coord = vec![0usize; rank];
        for slot in out.data.iter_mut() {
            let mut off = 0;
            for d in 0..rank {
                off += (ranges[d].start + coord[d]) * src_strides[d];
            }
            *slot = self.data[off];
            for d in (0..rank).rev() {
                coord[d] += 1;
                if coord[d] < out_shape[d] {
                    break;
                }
                coord[d] = 0;
            }
        }
        Ok(out)
    }

    /// Write `src` into the rectangular region described by `ranges`.
    pub fn slice_assign(&mut self, ranges: &[std::ops::Range<usize>], src: &Tensor<T>) -> Result<()> {
        if ranges.len() != self.shape.len() {
            return Err(Error::DimensionMismatch {
                op: "slice_assign",
                detail: format!("{} ranges for rank-{} tensor", ranges.len(), self.shape.len()),
            });
        }
        let region: Vec<usize> = ranges.iter().map(|r| r.end - r.start).collect();
        if region != src.shape {
            return Err(Error::DimensionMismatch {
                op: "slice_assign",
                detail: format!("region {:?} vs source {:?}", region, src.shape),
            });
        }
        for (d, r) in ranges.iter().enumerate() {
            if r.start > r.end || r.end > self.shape[d] {
                return Err(Error::IndexOutOfRange {
                    what: "slice range",
                    index: r.end,
                    size: self.shape[d],
                });
            }
        }
        if src.data.is_empty() {
            return Ok(());
        }
        let rank = self.shape.len();
        let mut dst_strides = vec![1usize; rank];
        for d in (0..rank.saturating_sub(1)).rev() {
            dst_strides[d] = dst_strides[d + 1] * self.shape[d + 1];
        }
        let mut coord = vec![0usize; rank];
        for &v in src.data.iter() {
            let mut off = 0;
            for d in 0..rank {
                off += (ranges[d].start + coord[d]) * dst_strides[d];
            }
            self.data[off] = v;
            for d in (0..rank).rev() {
                coord[d] += 1;
                if coord[d] < region[d] {
                    break;
                }
                coord[d] = 0;
            }
        }
        Ok(())
    }

    /// Add `src` elementwise into the rectangular region described by
    /// `ranges`, leaving the rest of the tensor untouched.
    pub fn slice_accumulate(&mut self, ranges: &[std::ops::Range<usize>], src: &Tensor<T>) -> Result<()> {
        if ranges.len() != self.shape.len() {
            return Err(Error::DimensionMismatch {
                op: "slice_accumulate",
                detail: format!("{} ranges for rank-{} tensor", ranges.len(), self.shape.len()),
            });
        }
        let region: Vec<usize> = ranges.iter().map(|r| r.end - r.start).collect();
        if region != src.shape {
            return Err(Error::DimensionMismatch {
                op: "slice_accumulate",
                detail: format!("region {:?} vs source {:?}", region, src.shape),
            });
        }
        for (d, r) in ranges.iter().enumerate() {
            if r.start > r.end || r.end > self.shape[d] {
                return Err(Error::IndexOutOfRange {
                    what: "slice range",
                    index: r.end,
                    size: self.shape[d],
                });
            }
        }
        if src.data.is_empty() {
            return Ok(());
        }
        let rank = self.shape.len();
        let mut dst_strides = vec![1usize; rank];
        for d in (0..rank.saturating_sub(1)).rev() {
            dst_strides[d] = dst_strides[d + 1] * self.shape[d + 1];
        }
        let mut coord = vec![0usize; rank];
        for &v in src.data.iter() {
            let mut off = 0;
            for d in 0..rank {
                off += (ranges[d].start + coord[d]) * dst_strides[d];
            }
            self.data[off] = self.data[off] + v;
            for d in (0..rank).rev() {
                coord[d] += 1;
                if coord[d] < region[d] {
                    break;
                }
                coord[d] = 0;
            }
        }
        Ok(())
    }

    /// Frobenius norm of the whole tensor.
    pub fn frobenius_norm(&self) -> T {
        self.data.iter().map(|&x| x * x).sum::<T>().sqrt()
    }

    /// Convert elementwise to another scalar type via f64.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::from_f64_val(x.to_f64_val())).collect(),
        }
    }
}

impl<T: Scalar> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 8 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}
