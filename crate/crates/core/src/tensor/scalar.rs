use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

/// Real number type the engine computes in.
///
/// Training runs in `f32`; gradient checks instantiate the same code with `f64`.
pub trait Scalar:
    Float + FromPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// `c = alpha * op(a) * op(b) + beta * c` with explicit row/column strides.
    ///
    /// `a` is `m x k`, `b` is `k x n`, `c` is `m x n`. Transposition is expressed
    /// purely through the strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );

    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 converts to any Scalar")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }
}

fn extent(rows: usize, cols: usize, (rs, cs): (isize, isize)) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    (rows - 1) * rs.unsigned_abs() + (cols - 1) * cs.unsigned_abs() + 1
}

macro_rules! impl_scalar {
    ($t:ty, $kernel:ident) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: &mut [Self],
                c_strides: (isize, isize),
            ) {
                assert!(a_strides.0 >= 0 && a_strides.1 >= 0);
                assert!(b_strides.0 >= 0 && b_strides.1 >= 0);
                assert!(c_strides.0 >= 0 && c_strides.1 >= 0);
                assert!(a.len() >= extent(m, k, a_strides));
                assert!(b.len() >= extent(k, n, b_strides));
                assert!(c.len() >= extent(m, n, c_strides));
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: strides are non-negative and every addressed element lies
                // inside the slices, checked by the extent asserts above.
                unsafe {
                    matrixmultiply::$kernel(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0,
                        c_strides.1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, sgemm);
impl_scalar!(f64, dgemm);
