//! Scalar abstraction so the whole stack runs in either `f32` or `f64`.

use std::fmt::{Debug, Display};

/// Element type tag stored in binary files (checkpoints, feature dumps).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 1,
            Dtype::F64 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Dtype> {
        match code {
            1 => Some(Dtype::F32),
            2 => Some(Dtype::F64),
            _ => None,
        }
    }

    pub fn byte_width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Floating-point scalar the tensor engine works over.
///
/// Extends [`num_traits::Float`] with the pieces the engine needs: a matrix
/// multiply kernel, exact little-endian (de)serialization for reproducible
/// binary files, and thread-safety bounds.
pub trait Scalar:
    num_traits::Float + num_traits::NumAssign + Debug + Display + Send + Sync + 'static
{
    const DTYPE: Dtype;

    /// Lossless-enough conversion from `f64` (used for constants and config values).
    fn of(v: f64) -> Self;
    /// Widening conversion for reporting.
    fn as_f64(self) -> f64;

    /// `C = A · B + beta · C` with row-major contiguous `A` (m×k), `B` (k×n), `C` (m×n).
    fn gemm_nn(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]);
    /// `C = Aᵀ · B + beta · C` where `A` is stored row-major as k×m.
    fn gemm_tn(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]);
    /// `C = A · Bᵀ + beta · C` where `B` is stored row-major as n×k.
    fn gemm_nt(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]);

    fn write_le(self, out: &mut Vec<u8>);
    /// Reads one value from the start of `bytes` (must hold at least the dtype width).
    fn read_le(bytes: &[u8]) -> Self;
}

macro_rules! impl_scalar {
    ($t:ty, $dtype:expr, $gemm:path, $bytes:expr) => {
        impl Scalar for $t {
            const DTYPE: Dtype = $dtype;

            #[inline]
            fn of(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            fn gemm_nn(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]) {
                debug_assert_eq!(a.len(), m * k);
                debug_assert_eq!(b.len(), k * n);
                debug_assert_eq!(c.len(), m * n);
                unsafe {
                    $gemm(
                        m, k, n,
                        1.0,
                        a.as_ptr(), k as isize, 1,
                        b.as_ptr(), n as isize, 1,
                        beta,
                        c.as_mut_ptr(), n as isize, 1,
                    );
                }
            }

            fn gemm_tn(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]) {
                debug_assert_eq!(a.len(), k * m);
                debug_assert_eq!(b.len(), k * n);
                debug_assert_eq!(c.len(), m * n);
                unsafe {
                    $gemm(
                        m, k, n,
                        1.0,
                        a.as_ptr(), 1, m as isize,
                        b.as_ptr(), n as isize, 1,
                        beta,
                        c.as_mut_ptr(), n as isize, 1,
                    );
                }
            }

            fn gemm_nt(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]) {
                debug_assert_eq!(a.len(), m * k);
                debug_assert_eq!(b.len(), n * k);
                debug_assert_eq!(c.len(), m * n);
                unsafe {
                    $gemm(
                        m, k, n,
                        1.0,
                        a.as_ptr(), k as isize, 1,
                        b.as_ptr(), 1, k as isize,
                        beta,
                        c.as_mut_ptr(), n as isize, 1,
                    );
                }
            }

            #[inline]
            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            #[inline]
            fn read_le(bytes: &[u8]) -> Self {
                let mut buf = [0u8; $bytes];
                buf.copy_from_slice(&bytes[..$bytes]);
                <$t>::from_le_bytes(buf)
            }
        }
    };
}

impl_scalar!(f32, Dtype::F32, matrixmultiply::sgemm, 4);
impl_scalar!(f64, Dtype::F64, matrixmultiply::dgemm, 8);
