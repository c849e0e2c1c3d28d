use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point type the network can run in. Training uses `f32`; the
/// gradient checker runs the same code in `f64`.
pub trait Scalar: Float + FromPrimitive + ToPrimitive + Default + Debug + Sum + Send + Sync + 'static {
    /// Row-major `C (m×n) = op(A) (m×k) · op(B) (k×n)`, added to `C` when
    /// `accumulate` is set. With `a_trans`, `a` holds a `k×m` matrix; with
    /// `b_trans`, `b` holds an `n×k` matrix.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_trans: bool,
        b: &[Self],
        b_trans: bool,
        c: &mut [Self],
        accumulate: bool,
    );

    #[inline]
    fn from_f32_lossy(v: f32) -> Self {
        Self::from_f32(v).expect("f32 converts to any float")
    }

    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("f64 converts to any float")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("float converts to f64")
    }
}

fn strides(m: usize, k: usize, n: usize, a_trans: bool, b_trans: bool) -> [isize; 4] {
    let (rsa, csa) = if a_trans { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_trans { (1, k) } else { (n, 1) };
    [rsa as isize, csa as isize, rsb as isize, csb as isize]
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_trans: bool,
                b: &[Self],
                b_trans: bool,
                c: &mut [Self],
                accumulate: bool,
            ) {
                assert_eq!(a.len(), m * k, "gemm: A has wrong length");
                assert_eq!(b.len(), k * n, "gemm: B has wrong length");
                assert_eq!(c.len(), m * n, "gemm: C has wrong length");
                if m == 0 || n == 0 {
                    return;
                }
                let [rsa, csa, rsb, csb] = strides(m, k, n, a_trans, b_trans);
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: the slice lengths were checked against the shapes
                // above and the strides address exactly those elements.
                unsafe {
                    $gemm(
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
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);
