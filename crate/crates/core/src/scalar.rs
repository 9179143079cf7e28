//! Floating-point scalar abstraction shared by the numeric kernels.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point scalar: `f32` or `f64`.
///
/// Training runs in `f64`; the kernels themselves only need `Float`
/// arithmetic, so they are written against this trait.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("usize representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// `C += A B` for strided row/column layouts: `A` is `m x k`, `B` is
    /// `k x n`, `C` is `m x n`. Strides are in elements.
    fn gemm_acc(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        sa: Strides,
        b: &[Self],
        sb: Strides,
        c: &mut [Self],
        sc: Strides,
    );
}

/// Row and column stride of a strided matrix view.
#[derive(Clone, Copy, Debug)]
pub struct Strides(pub usize, pub usize);

fn check_view(len: usize, rows: usize, cols: usize, s: Strides) {
    if rows > 0 && cols > 0 {
        assert!((rows - 1) * s.0 + (cols - 1) * s.1 < len, "strided view out of bounds");
    }
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn gemm_acc(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                sa: Strides,
                b: &[Self],
                sb: Strides,
                c: &mut [Self],
                sc: Strides,
            ) {
                if m == 0 || n == 0 || k == 0 {
                    return;
                }
                check_view(a.len(), m, k, sa);
                check_view(b.len(), k, n, sb);
                check_view(c.len(), m, n, sc);
                // SAFETY: every view was bounds-checked above and `c` is a
                // unique borrow disjoint from `a` and `b`.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        sa.0 as isize,
                        sa.1 as isize,
                        b.as_ptr(),
                        sb.0 as isize,
                        sb.1 as isize,
                        1.0,
                        c.as_mut_ptr(),
                        sc.0 as isize,
                        sc.1 as isize,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);
