//! Dense row-major tensors.
//!
//! A tensor of shape `[d0, d1, .., dk]` stores its values contiguously; the
//! coordinate `(i0, i1, .., ik)` lives at linear index
//! `((i0 * d1 + i1) * d2 + i2) .. * dk + ik`, i.e. the last axis varies fastest.
//! Feature maps use the `(batch, channels, height, width)` layout.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{Error, Result};

/// Storage type tag, mirrored in the on-disk container.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }
}

/// Floating point scalar the engine can compute with.
pub trait Element:
    Float + Default + Debug + Display + Send + Sync + 'static + AddAssign + SubAssign + MulAssign + Sum
{
    const DTYPE: DType;

    fn of(v: f64) -> Self;

    fn as_f64(self) -> f64;

    fn erf(self) -> Self;

    /// `c = alpha * a * b + beta * c` for an `m x k` by `k x n` product with
    /// arbitrary (non-negative) row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (usize, usize),
        b: &[Self],
        b_strides: (usize, usize),
        beta: Self,
        c: &mut [Self],
        c_strides: (usize, usize),
    );
}

fn check_extent(len: usize, rows: usize, cols: usize, (rs, cs): (usize, usize), what: &str) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows - 1) * rs + (cols - 1) * cs;
    assert!(last < len, "gemm operand {what} out of bounds: {last} >= {len}");
}

macro_rules! impl_element {
    ($t:ty, $dtype:expr, $gemm:path, $erf:path) => {
        impl Element for $t {
            const DTYPE: DType = $dtype;

            #[inline]
            fn of(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            #[inline]
            fn erf(self) -> Self {
                $erf(self)
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_strides: (usize, usize),
                b: &[Self],
                b_strides: (usize, usize),
                beta: Self,
                c: &mut [Self],
                c_strides: (usize, usize),
            ) {
                check_extent(a.len(), m, k, a_strides, "a");
                check_extent(b.len(), k, n, b_strides, "b");
                check_extent(c.len(), m, n, c_strides, "c");
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every index touched is bounded by the extent checks above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_strides.0 as isize,
                        a_strides.1 as isize,
                        b.as_ptr(),
                        b_strides.0 as isize,
                        b_strides.1 as isize,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0 as isize,
                        c_strides.1 as isize,
                    )
                }
            }
        }
    };
}

impl_element!(f32, DType::F32, matrixmultiply::sgemm, libm::erff);
impl_element!(f64, DType::F64, matrixmultiply::dgemm, libm::erf);

/// Dense tensor. Extents are strictly positive; a zero-dimensional shape is a scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

pub(crate) fn validate_shape(shape: &[usize]) -> Result<usize> {
    if let Some(axis) = shape.iter().position(|&d| d == 0) {
        return Err(Error::InvalidShape(format!(
            "extent of axis {axis} is zero in {shape:?}"
        )));
    }
    Ok(shape.iter().product())
}

/// Row-major strides for `shape`.
pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Offsets `sum(coord[i] * strides[i])` for every coordinate of `shape`, in
/// row-major order. Strides may be zero (broadcast) or permuted.
pub(crate) fn strided_offsets(shape: &[usize], strides: &[usize]) -> Vec<usize> {
    let rank = shape.len();
    let numel: usize = shape.iter().product();
    let mut out = Vec::with_capacity(numel);
    let mut coord = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..numel {
        out.push(offset);
        for ax in (0..rank).rev() {
            coord[ax] += 1;
            offset += strides[ax];
            if coord[ax] < shape[ax] {
                break;
            }
            offset -= strides[ax] * shape[ax];
            coord[ax] = 0;
        }
    }
    out
}

/// Gather map realising `permute(axis_order)` on a row-major tensor of `shape`:
/// `out[i] = in[map[i]]`. Also returns the permuted shape.
pub(crate) fn permute_index(shape: &[usize], axis_order: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let rank = shape.len();
    let mut seen = vec![false; rank];
    if axis_order.len() != rank {
        return Err(Error::InvalidShape(format!(
            "axis order {axis_order:?} does not match rank {rank}"
        )));
    }
    for &a in axis_order {
        if a >= rank || std::mem::replace(&mut seen[a], true) {
            return Err(Error::InvalidShape(format!(
                "axis order {axis_order:?} is not a permutation of 0..{rank}"
            )));
        }
    }
    let in_strides = strides_of(shape);
    let out_shape: Vec<usize> = axis_order.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axis_order.iter().map(|&a| in_strides[a]).collect();
    Ok((strided_offsets(&out_shape, &src_strides), out_shape))
}

/// Numpy-style broadcast of two shapes (aligned at the trailing axis).
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::InvalidShape(format!("shapes {a:?} and {b:?} do not broadcast"))),
        };
    }
    Ok(out)
}

/// For each element of `out_shape`, the linear index of the broadcast source
/// element in a tensor of `in_shape`.
pub(crate) fn broadcast_index(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let in_strides = strides_of(in_shape);
    let mut strides = vec![0; rank];
    for (i, (&d, &s)) in in_shape.iter().zip(&in_strides).enumerate() {
        let ax = rank - in_shape.len() + i;
        strides[ax] = if d == 1 { 0 } else { s };
    }
    strided_offsets(out_shape, &strides)
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let numel = validate_shape(&shape)?;
        if numel != data.len() {
            return Err(Error::InvalidShape(format!(
                "shape {shape:?} holds {numel} values but {} were given",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, v: T) -> Result<Self> {
        let shape = shape.into();
        let numel = validate_shape(&shape)?;
        Ok(Tensor {
            shape,
            data: vec![v; numel],
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(shape, T::one())
    }

    /// Values filled from their row-major linear index.
    pub fn from_fn(shape: impl Into<Vec<usize>>, f: impl FnMut(usize) -> T) -> Result<Self> {
        let shape = shape.into();
        let numel = validate_shape(&shape)?;
        Ok(Tensor {
            shape,
            data: (0..numel).map(f).collect(),
        })
    }

    /// Square identity matrix.
    pub fn eye(n: usize) -> Result<Self> {
        Self::from_fn([n, n], |i| if i / n == i % n { T::one() } else { T::zero() })
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

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    pub fn linear_index(&self, coord: &[usize]) -> Result<usize> {
        if coord.len() != self.shape.len() || coord.iter().zip(&self.shape).any(|(&c, &d)| c >= d) {
            return Err(Error::InvalidShape(format!(
                "coordinate {coord:?} outside shape {:?}",
                self.shape
            )));
        }
        Ok(coord.iter().zip(self.strides()).map(|(&c, s)| c * s).sum())
    }

    pub fn get(&self, coord: &[usize]) -> Result<T> {
        Ok(self.data[self.linear_index(coord)?])
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let numel = validate_shape(&shape)?;
        if numel != self.data.len() {
            return Err(Error::InvalidShape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn permute(&self, axis_order: &[usize]) -> Result<Self> {
        let (map, out_shape) = permute_index(&self.shape, axis_order)?;
        Ok(Tensor {
            shape: out_shape,
            data: map.into_iter().map(|i| self.data[i]).collect(),
        })
    }

    /// Reshape into `new_shape`, then reorder axes by `axis_order`.
    pub fn reshape_permute(&self, new_shape: &[usize], axis_order: &[usize]) -> Result<Self> {
        self.clone().reshape(new_shape.to_vec())?.permute(axis_order)
    }

    /// `out[i] = self[index[i]]`, reshaped to `shape`.
    pub fn gather(&self, index: &[usize], shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if let Some(&bad) = index.iter().find(|&&i| i >= self.data.len()) {
            return Err(Error::InvalidShape(format!(
                "gather index {bad} outside tensor of {} values",
                self.data.len()
            )));
        }
        Tensor::new(shape, index.iter().map(|&i| self.data[i]).collect())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        if self.shape != other.shape {
            return Err(Error::InvalidShape(format!(
                "cannot compare {:?} with {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
