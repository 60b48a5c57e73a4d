//! Rank-4 NCHW tensors and the seeded random stream used throughout the crate.
//!
//! Storage is a contiguous row-major buffer: the flat index of `(n, c, h, w)`
//! is `((n * C + c) * H + h) * W + w`. Every elementwise operation returns a
//! new tensor and leaves its inputs untouched; `add_assign` is the one
//! in-place accumulator and is only used by single-writer code paths.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{Index, IndexMut};

use num_traits::{Float, FromPrimitive};
use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Extents in `(N, C, H, W)` order.
pub type Dims = [usize; 4];

/// Floating point element type. Training runs in `f32`; gradient checking
/// runs the same code in `f64`.
pub trait Scalar: Float + FromPrimitive + Debug + Default + Send + Sync + Sum + 'static {
    /// Raw strided `C <- alpha * A B + beta * C`.
    ///
    /// # Safety
    /// The pointers and strides must describe matrices of the given extents
    /// that lie entirely inside live allocations, and `c` must not alias `a`
    /// or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable in scalar type")
    }
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Row-major `C (m x n) <- A (m x k) B (k x n) + beta * C`, where either
/// operand may be stored transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_transposed: bool,
    b: &[T],
    b_transposed: bool,
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: extents checked above; `c` is a distinct mutable borrow.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4<T> {
    dims: Dims,
    data: Vec<T>,
}

pub(crate) fn checked_len(dims: Dims) -> Result<usize> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&len| len <= isize::MAX as usize)
        .ok_or(Error::SizeOverflow(dims))
}

impl<T: Scalar> Tensor4<T> {
    pub fn zeros(dims: Dims) -> Result<Self> {
        Self::full(dims, T::zero())
    }

    pub fn full(dims: Dims, value: T) -> Result<Self> {
        let len = checked_len(dims)?;
        Ok(Tensor4 {
            dims,
            data: vec![value; len],
        })
    }

    pub fn from_vec(dims: Dims, data: Vec<T>) -> Result<Self> {
        let len = checked_len(dims)?;
        if data.len() != len {
            return Err(Error::LengthMismatch {
                dims,
                len: data.len(),
            });
        }
        Ok(Tensor4 { dims, data })
    }

    /// I.i.d. Gaussian samples drawn from `rng` in flat-index order.
    pub fn randn(dims: Dims, mean: f64, stddev: f64, rng: &mut Rng) -> Result<Self> {
        if stddev.is_nan() || stddev < 0.0 {
            return Err(Error::invalid("randn", format!("stddev must be >= 0, got {stddev}")));
        }
        let len = checked_len(dims)?;
        let data = (0..len)
            .map(|_| T::lit(mean + stddev * rng.normal()))
            .collect();
        Ok(Tensor4 { dims, data })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn n(&self) -> usize {
        self.dims[0]
    }

    pub fn c(&self) -> usize {
        self.dims[1]
    }

    pub fn h(&self) -> usize {
        self.dims[2]
    }

    pub fn w(&self) -> usize {
        self.dims[3]
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

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        let [_, cc, hh, ww] = self.dims;
        ((n * cc + c) * hh + h) * ww + w
    }

    /// Elements per batch entry (`C * H * W`).
    pub fn sample_len(&self) -> usize {
        self.dims[1] * self.dims[2] * self.dims[3]
    }

    pub fn sample(&self, n: usize) -> &[T] {
        let len = self.sample_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [T] {
        let len = self.sample_len();
        &mut self.data[n * len..(n + 1) * len]
    }

    pub fn reshape(self, dims: Dims) -> Result<Self> {
        Self::from_vec(dims, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor4 {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_dims(op, other.dims)?;
        Ok(Tensor4 {
            dims: self.dims,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.expect_dims("add_assign", other.dims)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    /// Sequential left-to-right sum; the fixed order keeps results bitwise
    /// reproducible.
    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    /// Largest element, `-inf` for an empty tensor. NaN entries are skipped.
    pub fn max(&self) -> T {
        self.data.iter().fold(T::neg_infinity(), |acc, &v| acc.max(v))
    }

    pub fn mean_square(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        let sq: f64 = self
            .data
            .iter()
            .map(|v| {
                let v = v.to_f64().unwrap_or(f64::NAN);
                v * v
            })
            .sum();
        sq / self.data.len() as f64
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor4<U> {
        Tensor4 {
            dims: self.dims,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan()))
                .collect(),
        }
    }

    pub(crate) fn expect_dims(&self, op: &'static str, dims: Dims) -> Result<()> {
        if self.dims != dims {
            return Err(Error::ShapeMismatch {
                op,
                expected: self.dims,
                found: dims,
            });
        }
        Ok(())
    }
}

impl<T: Scalar> Index<[usize; 4]> for Tensor4<T> {
    type Output = T;

    fn index(&self, [n, c, h, w]: [usize; 4]) -> &T {
        &self.data[self.offset(n, c, h, w)]
    }
}

impl<T: Scalar> IndexMut<[usize; 4]> for Tensor4<T> {
    fn index_mut(&mut self, [n, c, h, w]: [usize; 4]) -> &mut T {
        let at = self.offset(n, c, h, w);
        &mut self.data[at]
    }
}

/// Seeded ChaCha8 stream with Box–Muller Gaussian sampling.
///
/// `Rng::with_stream(seed, k)` selects one of 2^64 independent streams for
/// the same seed, which lets weight initialization and per-epoch data order
/// draw from separate, individually reproducible sequences.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng {
            seed,
            inner,
            spare_normal: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    /// Uniform integer in `[0, bound)`. `bound` must be positive.
    pub fn below(&mut self, bound: usize) -> usize {
        self.inner.gen_range(0..bound)
    }

    pub fn coin(&mut self) -> bool {
        self.inner.gen::<bool>()
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // 1 - U lies in (0, 1], keeping ln finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Fisher–Yates permutation of `0..len`.
    pub fn permutation(&mut self, len: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..len).collect();
        idx.shuffle(&mut self.inner);
        idx
    }
}
