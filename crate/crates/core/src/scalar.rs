//! Scalar abstraction shared by every numeric routine in the crate.
//!
//! Production runs use `f32`; gradient checks instantiate the same code with
//! `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Element type tag used by the weight container.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Floating-point element type of tensors, models and optimizers.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;

    /// `c = alpha * a·b + beta * c` for an `m×k` by `k×n` product with
    /// arbitrary row/column strides.
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

    fn write_le(self, out: &mut Vec<u8>);

    /// Decodes one value; `bytes` must hold exactly `DTYPE.size()` bytes.
    fn read_le(bytes: &[u8]) -> Self;

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

fn span(rows: usize, cols: usize, strides: (usize, usize)) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * strides.0 + (cols - 1) * strides.1 + 1
    }
}

macro_rules! impl_scalar {
    ($t:ty, $dtype:expr, $gemm:path, $n:expr) => {
        impl Scalar for $t {
            const DTYPE: DType = $dtype;

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
                assert!(a.len() >= span(m, k, a_strides), "gemm: lhs too short");
                assert!(b.len() >= span(k, n, b_strides), "gemm: rhs too short");
                assert!(c.len() >= span(m, n, c_strides), "gemm: output too short");
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: the asserts above bound every index the kernel touches.
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
                    );
                }
            }

            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn read_le(bytes: &[u8]) -> Self {
                let mut raw = [0u8; $n];
                raw.copy_from_slice(bytes);
                <$t>::from_le_bytes(raw)
            }
        }
    };
}

impl_scalar!(f32, DType::F32, matrixmultiply::sgemm, 4);
impl_scalar!(f64, DType::F64, matrixmultiply::dgemm, 8);
