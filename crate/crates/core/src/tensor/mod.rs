//! Dense row-major tensors and the reverse-mode graph built on top of them.
//!
//! A [`Tensor`] is an immutable value: its buffer sits behind an `Arc`, so
//! cloning is cheap and no operation ever writes through a shared handle.
//! Training runs in `f32`; the same code paths are instantiated with `f64`
//! for finite-difference gradient checks.

pub mod archive;
mod autodiff;
pub mod gradcheck;
pub(crate) mod kernels;

pub use autodiff::{Gradients, Graph, Var};

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};
use std::sync::Arc;

use num_traits::{Float, FromPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{shape_err, Error, Result};

/// Floating-point element type usable inside a [`Tensor`].
pub trait Element:
    Float
    + FromPrimitive
    + Default
    + Debug
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + 'static
{
    const DTYPE: &'static str;
    const SIZE: usize;

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).unwrap()
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap()
    }

    /// `c[m×n] = a[m×k] · b[k×n]` where each operand is addressed through
    /// its row and column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        c: &mut [Self],
    );
}

fn check_gemm_extents(m: usize, k: usize, n: usize, a: usize, b: usize, c: usize) {
    assert!(
        a >= m * k && b >= k * n && c >= m * n,
        "gemm operand too small"
    );
}

impl Element for f32 {
    const DTYPE: &'static str = "f32";
    const SIZE: usize = 4;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().unwrap())
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        (rsa, csa): (isize, isize),
        b: &[f32],
        (rsb, csb): (isize, isize),
        c: &mut [f32],
    ) {
        check_gemm_extents(m, k, n, a.len(), b.len(), c.len());
        // SAFETY: the strides passed by the kernels address exactly the
        // m×k, k×n and m×n elements whose extents were checked above.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                0.0,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

impl Element for f64 {
    const DTYPE: &'static str = "f64";
    const SIZE: usize = 8;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().unwrap())
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        (rsa, csa): (isize, isize),
        b: &[f64],
        (rsb, csb): (isize, isize),
        c: &mut [f64],
    ) {
        check_gemm_extents(m, k, n, a.len(), b.len(), c.len());
        // SAFETY: as for f32.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                0.0,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T: Element = f32> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Element> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("dtype", &T::DTYPE)
            .finish()
    }
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Validation(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return shape_err("tensor construction", shape, &[data.len()]);
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::new(data),
        })
    }

    /// Builds a tensor from nested rows. Panics on ragged input.
    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flatten().copied().collect();
        Self::new(&[rows.len(), cols], data).expect("non-empty rows")
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: Arc::new(vec![value]),
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n]).expect("positive extents")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    /// Samples i.i.d. normal entries with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::of(z * std)
            })
            .collect();
        Self::new(shape, data).expect("positive extents")
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::of(rng.random_range(lo..hi))).collect();
        Self::new(shape, data).expect("positive extents")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn to_vec(&self) -> Vec<T> {
        self.data.as_ref().clone()
    }

    /// Takes the buffer, copying only if it is shared.
    pub fn into_vec(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| shared.as_ref().clone())
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// Returns `(rows, cols)` for a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => shape_err("rank-2 view", other, &[0, 0]),
        }
    }

    /// Extent of the last axis.
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.last_dim();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.len() {
            return shape_err("reshape", &self.shape, shape);
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&x| f(x)).collect()),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return shape_err("zip", &self.shape, &other.shape);
        }
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Self {
            shape: self.shape.clone(),
            data: Arc::new(data),
        })
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&x| U::of(x.as_f64())).collect()),
        }
    }

    /// Plain (non-recorded) matrix product.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return shape_err("matmul", &self.shape, &other.shape);
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_nn(&self.data, &other.data, &mut out, m, k, n);
        Self::new(&[m, n], out)
    }

    pub fn transpose(&self) -> Result<Self> {
        let (m, n) = self.dims2()?;
        Self::new(&[n, m], kernels::transpose(&self.data, m, n))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|x| x * c)
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.shape != other.shape {
            return shape_err("max_abs_diff", &self.shape, &other.shape);
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max))
    }

    /// Bitwise equality of shape and every element.
    pub fn bit_eq(&self, other: &Self) -> bool
    where
        T: Into<f64>,
    {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(&a, &b)| a.into().to_bits() == b.into().to_bits())
    }
}

impl Tensor<f32> {
    pub fn to_bits(&self) -> Vec<u32> {
        self.data.iter().map(|x| x.to_bits()).collect()
    }
}
