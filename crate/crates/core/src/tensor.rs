//! Dense 5-d tensors (`[batch, channel, depth, height, width]`) over `f32`/`f64`.
//!
//! 2-d data is stored with `depth == 1`.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{CcsdError, Result};

/// Floating point element type. Implemented for `f32` and `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + 'static
{
    /// Type tag stored in checkpoints and case files.
    const DTYPE: DType;

    /// `c = alpha * a * b + beta * c` with explicit row/column strides.
    ///
    /// # Safety
    /// Every index reachable through the given dimensions and strides must be
    /// in bounds of the corresponding slice.
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

    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 converts")
    }

    fn f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Strided matrix view used by [`gemm`].
#[derive(Clone, Copy)]
pub struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a, T> MatRef<'a, T> {
    /// Row-major `rows x cols` matrix.
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self::with_ld(data, rows, cols, cols)
    }

    /// Row-major matrix whose rows are `ld` elements apart.
    pub fn with_ld(data: &'a [T], rows: usize, cols: usize, ld: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            row_stride: ld,
            col_stride: 1,
        }
    }

    /// View of a row-major `cols x rows` buffer as a `rows x cols` matrix.
    pub fn transpose_of(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self::transpose_with_ld(data, rows, cols, rows)
    }

    /// Transposed view of a row-major buffer whose rows are `ld` apart.
    pub fn transpose_with_ld(data: &'a [T], rows: usize, cols: usize, ld: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            row_stride: 1,
            col_stride: ld,
        }
    }

    fn span(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride + 1
        }
    }
}

/// `c (m x n, row-major) = alpha * a * b + beta * c`.
pub fn gemm<T: Scalar>(alpha: T, a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, c: &mut [T]) {
    let n = b.cols;
    gemm_ld(alpha, a, b, beta, c, n)
}

/// Like [`gemm`] but the rows of `c` are `ldc` elements apart.
pub fn gemm_ld<T: Scalar>(alpha: T, a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, c: &mut [T], ldc: usize) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(b.rows, k, "gemm inner dimensions");
    assert!(ldc >= n);
    let c_span = if m == 0 || n == 0 { 0 } else { (m - 1) * ldc + n };
    assert!(a.data.len() >= a.span() && b.data.len() >= b.span() && c.len() >= c_span);
    // SAFETY: the asserts above bound every index reachable from the strides.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        )
    }
}

pub type Shape = [usize; 5];

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Self {
            shape,
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: [1; 5],
            data: vec![value],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(CcsdError::ShapeMismatch {
                expected: vec![expected],
                actual: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn spatial_shape(&self) -> [usize; 3] {
        [self.shape[2], self.shape[3], self.shape[4]]
    }

    /// Voxels per channel.
    pub fn spatial(&self) -> usize {
        self.shape[2] * self.shape[3] * self.shape[4]
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

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&x| U::of(x.f64())).collect(),
        }
    }

    /// Contiguous data of one `(batch, channel)` plane.
    pub fn plane(&self, b: usize, c: usize) -> &[T] {
        let s = self.spatial();
        let start = (b * self.shape[1] + c) * s;
        &self.data[start..start + s]
    }

    pub fn plane_mut(&mut self, b: usize, c: usize) -> &mut [T] {
        let s = self.spatial();
        let start = (b * self.shape[1] + c) * s;
        &mut self.data[start..start + s]
    }

    /// All channels of one batch item.
    pub fn item_data(&self, b: usize) -> &[T] {
        let n = self.shape[1] * self.spatial();
        &self.data[b * n..(b + 1) * n]
    }

    /// Channels `[start, end)` as a new tensor.
    pub fn channel_range(&self, start: usize, end: usize) -> Tensor<T> {
        assert!(start <= end && end <= self.shape[1]);
        let mut out = Tensor::zeros([self.shape[0], end - start, self.shape[2], self.shape[3], self.shape[4]]);
        for b in 0..self.shape[0] {
            for (oc, c) in (start..end).enumerate() {
                out.plane_mut(b, oc).copy_from_slice(self.plane(b, c));
            }
        }
        out
    }

    /// Concatenates tensors along the batch axis.
    pub fn stack_batch(items: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let first = items
            .first()
            .ok_or_else(|| CcsdError::invalid("cannot stack zero tensors"))?;
        let mut shape = first.shape;
        for t in items {
            if t.shape[1..] != first.shape[1..] {
                return Err(CcsdError::ShapeMismatch {
                    expected: first.shape.to_vec(),
                    actual: t.shape.to_vec(),
                });
            }
        }
        shape[0] = items.iter().map(|t| t.shape[0]).sum();
        let mut data = Vec::with_capacity(shape.iter().product());
        for t in items {
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor { shape, data })
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }
}

/// Softmax over the channel axis at every `(batch, voxel)` position.
pub fn softmax_channels<T: Scalar>(logits: &Tensor<T>, temperature: T) -> Tensor<T> {
    let [b, c, ..] = logits.shape();
    let s = logits.spatial();
    let mut out = Tensor::zeros(logits.shape());
    let x = logits.data();
    let y = out.data_mut();
    let mut maxes = vec![T::zero(); s];
    let mut sums = vec![T::zero(); s];
    for bi in 0..b {
        let base = bi * c * s;
        maxes.iter_mut().for_each(|m| *m = T::neg_infinity());
        for ci in 0..c {
            let row = &x[base + ci * s..base + (ci + 1) * s];
            for (m, &v) in maxes.iter_mut().zip(row) {
                *m = m.max(v / temperature);
            }
        }
        sums.iter_mut().for_each(|v| *v = T::zero());
        for ci in 0..c {
            let off = base + ci * s;
            for p in 0..s {
                let e = (x[off + p] / temperature - maxes[p]).exp();
                y[off + p] = e;
                sums[p] += e;
            }
        }
        for ci in 0..c {
            let off = base + ci * s;
            for p in 0..s {
                y[off + p] /= sums[p];
            }
        }
    }
    out
}

/// Per-voxel argmax over channels; ties resolve to the lowest channel.
pub fn argmax_channels<T: Scalar>(scores: &Tensor<T>) -> Vec<u8> {
    let [b, c, ..] = scores.shape();
    let s = scores.spatial();
    let mut out = vec![0u8; b * s];
    for bi in 0..b {
        for p in 0..s {
            let mut best = 0usize;
            let mut best_v = scores.data()[bi * c * s + p];
            for ci in 1..c {
                let v = scores.data()[(bi * c + ci) * s + p];
                if v > best_v {
                    best = ci;
                    best_v = v;
                }
            }
            out[bi * s + p] = best as u8;
        }
    }
    out
}
