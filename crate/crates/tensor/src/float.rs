use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float as NumFloat, FromPrimitive, ToPrimitive};

/// Storage width recorded in checkpoint headers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
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

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn parse(name: &str) -> Option<DType> {
        match name {
            "f32" => Some(DType::F32),
            "f64" => Some(DType::F64),
            _ => None,
        }
    }
}

/// Scalar element type of a [`crate::Tensor`].
///
/// `f32` is the training width; `f64` exists so gradient checks can be run
/// against finite differences at tight tolerances.
pub trait Float:
    NumFloat + FromPrimitive + ToPrimitive + Default + Debug + Display + Sum + Send + Sync + 'static
{
    const DTYPE: DType;

    fn erf(self) -> Self;

    /// `C = alpha * A B + beta * C` over strided row/column layouts.
    ///
    /// # Safety
    /// Every pointer must be valid for the extents and strides given.
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

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }
}

impl Float for f32 {
    const DTYPE: DType = DType::F32;

    fn erf(self) -> Self {
        libm::erff(self)
    }

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

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f32 {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Float for f64 {
    const DTYPE: DType = DType::F64;

    fn erf(self) -> Self {
        libm::erf(self)
    }

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

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f64 {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

/// A strided matrix view into a slice: `rows x cols` starting at `offset`.
#[derive(Debug, Clone, Copy)]
pub struct MatView {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl MatView {
    pub fn dense(offset: usize, rows: usize, cols: usize) -> Self {
        MatView { offset, rows, cols, row_stride: cols, col_stride: 1 }
    }

    pub fn transposed(self) -> Self {
        MatView {
            offset: self.offset,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    fn last_index(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return self.offset;
        }
        self.offset + (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride
    }
}

/// Bounds-checked wrapper over [`Float::gemm_raw`]: `c = alpha * a b + beta * c`.
pub fn gemm<F: Float>(alpha: F, a: &[F], av: MatView, b: &[F], bv: MatView, beta: F, c: &mut [F], cv: MatView) {
    assert_eq!(av.cols, bv.rows, "gemm inner extent");
    assert_eq!(av.rows, cv.rows, "gemm output rows");
    assert_eq!(bv.cols, cv.cols, "gemm output cols");
    if cv.rows == 0 || cv.cols == 0 {
        return;
    }
    if av.cols == 0 {
        for i in 0..cv.rows {
            for j in 0..cv.cols {
                let idx = cv.offset + i * cv.row_stride + j * cv.col_stride;
                c[idx] = beta * c[idx];
            }
        }
        return;
    }
    assert!(av.last_index() < a.len(), "gemm lhs out of bounds");
    assert!(bv.last_index() < b.len(), "gemm rhs out of bounds");
    assert!(cv.last_index() < c.len(), "gemm output out of bounds");
    if av.rows * av.cols * bv.cols <= SMALL_GEMM {
        small_gemm(alpha, a, av, b, bv, beta, c, cv);
        return;
    }
    // SAFETY: extents and strides were checked against the slice lengths above,
    // and `c` is uniquely borrowed.
    unsafe {
        F::gemm_raw(
            av.rows,
            av.cols,
            bv.cols,
            alpha,
            a.as_ptr().add(av.offset),
            av.row_stride as isize,
            av.col_stride as isize,
            b.as_ptr().add(bv.offset),
            bv.row_stride as isize,
            bv.col_stride as isize,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.row_stride as isize,
            cv.col_stride as isize,
        );
    }
}

/// Below this many multiply-adds the packing in the blocked kernel costs more
/// than it saves.
const SMALL_GEMM: usize = 8192;

#[allow(clippy::too_many_arguments)]
fn small_gemm<F: Float>(alpha: F, a: &[F], av: MatView, b: &[F], bv: MatView, beta: F, c: &mut [F], cv: MatView) {
    let (m, k, n) = (av.rows, av.cols, bv.cols);
    for i in 0..m {
        let crow = cv.offset + i * cv.row_stride;
        for j in 0..n {
            let idx = crow + j * cv.col_stride;
            c[idx] = if beta == F::zero() { F::zero() } else { beta * c[idx] };
        }
        for p in 0..k {
            let x = alpha * a[av.offset + i * av.row_stride + p * av.col_stride];
            let brow = bv.offset + p * bv.row_stride;
            if cv.col_stride == 1 && bv.col_stride == 1 {
                let cs = &mut c[crow..crow + n];
                let bs = &b[brow..brow + n];
                for (cj, &bj) in cs.iter_mut().zip(bs) {
                    *cj = *cj + x * bj;
                }
            } else {
                for j in 0..n {
                    let idx = crow + j * cv.col_stride;
                    c[idx] = c[idx] + x * b[brow + j * bv.col_stride];
                }
            }
        }
    }
}
