//! Scalar abstraction, strided GEMM, and the channel-major feature map.

use std::fmt::Debug;

use num_traits::Float;

/// Floating-point element type of the network (f32 for training, f64 for
/// reference gradients).
pub trait Scalar: Float + Default + Debug + Send + Sync + std::iter::Sum + 'static {
    fn of(v: f64) -> Self;
    fn to_f64(self) -> f64;

    /// Raw strided GEMM: `C = alpha * A * B + beta * C`.
    ///
    /// # Safety
    /// Every index reachable through the given shapes and strides must be in
    /// bounds of the corresponding buffer.
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
}

impl Scalar for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Row/column strides of a matrix operand.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Strides {
    pub row: usize,
    pub col: usize,
}

impl Strides {
    /// Row-major with leading dimension `ld`.
    pub fn rm(ld: usize) -> Self {
        Strides { row: ld, col: 1 }
    }
    /// Transposed view of a row-major matrix with leading dimension `ld`.
    pub fn tr(ld: usize) -> Self {
        Strides { row: 1, col: ld }
    }
}

fn reach(rows: usize, cols: usize, s: Strides) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * s.row + (cols - 1) * s.col + 1
    }
}

/// Bounds-checked GEMM over slices: `C[m x n] = alpha * A[m x k] B[k x n] + beta * C`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    sa: Strides,
    b: &[T],
    sb: Strides,
    beta: T,
    c: &mut [T],
    sc: Strides,
) {
    assert!(reach(m, k, sa) <= a.len(), "gemm: A out of bounds");
    assert!(reach(k, n, sb) <= b.len(), "gemm: B out of bounds");
    assert!(reach(m, n, sc) <= c.len(), "gemm: C out of bounds");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let v = &mut c[i * sc.row + j * sc.col];
                *v = beta * *v;
            }
        }
        return;
    }
    // SAFETY: the asserts above bound every index the kernel can touch.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            sa.row as isize,
            sa.col as isize,
            b.as_ptr(),
            sb.row as isize,
            sb.col as isize,
            beta,
            c.as_mut_ptr(),
            sc.row as isize,
            sc.col as isize,
        );
    }
}

/// Batch of feature maps stored channel-major: `[c][n][h][w]`.
///
/// With this layout a channel's values over the whole batch are contiguous,
/// so 1x1 and transposed convolutions are single GEMMs and batch norm
/// statistics are contiguous reductions.
#[derive(Debug, Clone, PartialEq)]
pub struct Feat<T> {
    pub c: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Feat<T> {
    pub fn zeros(c: usize, n: usize, h: usize, w: usize) -> Self {
        Feat {
            c,
            n,
            h,
            w,
            data: vec![T::zero(); c * n * h * w],
        }
    }

    /// Values per channel (`n * h * w`).
    #[inline]
    pub fn plane(&self) -> usize {
        self.n * self.h * self.w
    }

    #[inline]
    pub fn at(&self, c: usize, n: usize, y: usize, x: usize) -> T {
        self.data[((c * self.n + n) * self.h + y) * self.w + x]
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let p = self.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn same_shape(&self, o: &Feat<T>) -> bool {
        (self.c, self.n, self.h, self.w) == (o.c, o.n, o.h, o.w)
    }

    /// Channel concatenation `[a; b]`.
    pub fn concat(a: &Feat<T>, b: &Feat<T>) -> Feat<T> {
        assert_eq!((a.n, a.h, a.w), (b.n, b.h, b.w), "concat: spatial mismatch");
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Feat {
            c: a.c + b.c,
            n: a.n,
            h: a.h,
            w: a.w,
            data,
        }
    }

    /// Inverse of [`Feat::concat`]: the first `ca` channels and the rest.
    pub fn split(self, ca: usize) -> (Feat<T>, Feat<T>) {
        let cut = ca * self.plane();
        let mut data = self.data;
        let tail = data.split_off(cut);
        (
            Feat {
                c: ca,
                n: self.n,
                h: self.h,
                w: self.w,
                data,
            },
            Feat {
                c: self.c - ca,
                n: self.n,
                h: self.h,
                w: self.w,
                data: tail,
            },
        )
    }
}
