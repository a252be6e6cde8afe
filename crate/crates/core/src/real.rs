use core::fmt::{Debug, Display};
use core::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

/// Scalar type of the tensor engine. Training runs in `f32`; gradient checks
/// and reference computations run in `f64`.
pub trait Real: Float + FromPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static {
    /// `c = alpha * a @ b + beta * c` over strided row/column views.
    ///
    /// # Safety
    /// Every index reachable through the given dimensions and strides must be
    /// in bounds for the respective pointer. When `beta` is zero `c` is not read.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
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
        Self::from_f64(v).expect("literal representable")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {
    unsafe fn gemm(
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

impl Real for f64 {
    unsafe fn gemm(
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

/// Strided view used by [`gemm`]; `offset` is where element (0, 0) lives.
#[derive(Clone, Copy, Debug)]
pub struct Strided {
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl Strided {
    pub const fn row_major(offset: usize, cols: usize) -> Self {
        Strided {
            offset,
            rs: cols,
            cs: 1,
        }
    }

    /// The transpose of a row-major matrix with `cols` columns.
    pub const fn transposed(offset: usize, cols: usize) -> Self {
        Strided {
            offset,
            rs: 1,
            cs: cols,
        }
    }

    fn last(&self, rows: usize, cols: usize) -> usize {
        self.offset + (rows - 1) * self.rs + (cols - 1) * self.cs
    }
}

/// Bounds-checked strided GEMM: `c[m×n] = alpha * a[m×k] b[k×n] + beta * c`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    sa: Strided,
    b: &[T],
    sb: Strided,
    beta: T,
    c: &mut [T],
    sc: Strided,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(sc.last(m, n) < c.len(), "gemm: c out of bounds");
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let x = &mut c[sc.offset + i * sc.rs + j * sc.cs];
                *x = if beta == T::zero() { T::zero() } else { *x * beta };
            }
        }
        return;
    }
    assert!(sa.last(m, k) < a.len(), "gemm: a out of bounds");
    assert!(sb.last(k, n) < b.len(), "gemm: b out of bounds");
    // SAFETY: all reachable indices were bounds-checked above.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(sa.offset),
            sa.rs as isize,
            sa.cs as isize,
            b.as_ptr().add(sb.offset),
            sb.rs as isize,
            sb.cs as isize,
            beta,
            c.as_mut_ptr().add(sc.offset),
            sc.rs as isize,
            sc.cs as isize,
        )
    }
}
