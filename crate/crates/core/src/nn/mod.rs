//! Minimal convolutional building blocks with hand-written backward passes.
//!
//! Activations use a channel-major `C×N×H×W` layout so that every
//! convolution lowers to a single GEMM per sample chunk and the output lands
//! in place without transposes.

mod adam;
mod layers;

pub use adam::Adam;
pub use layers::{
    Activation, BlockCache, Conv2d, ConvBlock, GroupNorm, MaxPool2d, Param, Stack, StackCache,
};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type of a network.
///
/// Training and inference run in `f32`; the gradient checks run the same code in `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + std::fmt::Debug + Send + Sync + std::iter::Sum + 'static
{
    /// `C ← alpha·A·B + beta·C` over strided row/column views.
    ///
    /// # Safety
    /// Every strided index of `a`, `b` and `c` must be in bounds.
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

    fn from_single(v: f32) -> Self;

    fn to_single(self) -> f32;
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

    fn from_single(v: f32) -> f32 {
        v
    }

    fn to_single(self) -> f32 {
        self
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

    fn from_single(v: f32) -> f64 {
        f64::from(v)
    }

    fn to_single(self) -> f32 {
        self as f32
    }
}

/// Strided read-only matrix view.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a, T> {
    pub data: &'a [T],
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

/// Strided mutable matrix view.
pub(crate) struct MatMut<'a, T> {
    pub data: &'a mut [T],
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

fn last_index(offset: usize, rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    offset + (rows - 1) * rs + (cols - 1) * cs
}

/// Bounds-checked GEMM: `c ← alpha·a·b + beta·c` with `a: m×k`, `b: k×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: MatRef<'_, T>,
    b: MatRef<'_, T>,
    beta: T,
    c: MatMut<'_, T>,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = c.offset + i * c.rs + j * c.cs;
                c.data[idx] = beta * c.data[idx];
            }
        }
        return;
    }
    assert!(last_index(a.offset, m, k, a.rs, a.cs) < a.data.len(), "gemm: lhs out of bounds");
    assert!(last_index(b.offset, k, n, b.rs, b.cs) < b.data.len(), "gemm: rhs out of bounds");
    assert!(last_index(c.offset, m, n, c.rs, c.cs) < c.data.len(), "gemm: output out of bounds");
    // SAFETY: the asserts above bound every strided index touched by the kernel.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

/// Dense activation tensor in `C×N×H×W` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T> {
    pub data: Vec<T>,
    pub c: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
}

impl<T: Scalar> Tensor4<T> {
    pub fn zeros(c: usize, n: usize, h: usize, w: usize) -> Self {
        Self {
            data: vec![T::zero(); c * n * h * w],
            c,
            n,
            h,
            w,
        }
    }

    pub fn from_vec(data: Vec<T>, c: usize, n: usize, h: usize, w: usize) -> Self {
        assert_eq!(data.len(), c * n * h * w, "tensor buffer length");
        Self { data, c, n, h, w }
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.c, self.n, self.h, self.w]
    }

    #[inline]
    pub fn index(&self, c: usize, n: usize, y: usize, x: usize) -> usize {
        ((c * self.n + n) * self.h + y) * self.w + x
    }

    /// Column `n` of a `C×N×1×1` tensor.
    pub fn column(&self, n: usize) -> Vec<T> {
        debug_assert_eq!(self.plane(), 1);
        (0..self.c).map(|c| self.data[c * self.n + n]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strided_gemm_matches_naive_product() {
        let a: Vec<f64> = (0..6).map(f64::from).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|i| f64::from(i) * 0.5).collect(); // 3x4
        let mut c = vec![1.0; 8];
        gemm(
            2,
            3,
            4,
            1.0,
            MatRef { data: &a, offset: 0, rs: 3, cs: 1 },
            MatRef { data: &b, offset: 0, rs: 4, cs: 1 },
            1.0,
            MatMut { data: &mut c, offset: 0, rs: 4, cs: 1 },
        );
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = 1.0 + (0..3).map(|p| a[i * 3 + p] * b[p * 4 + j]).sum::<f64>();
                assert_eq!(c[i * 4 + j], want);
            }
        }
        // aᵀ·a through a transposed view of `a`
        let mut ata = vec![0.0; 9];
        gemm(
            3,
            2,
            3,
            1.0,
            MatRef { data: &a, offset: 0, rs: 1, cs: 3 },
            MatRef { data: &a, offset: 0, rs: 3, cs: 1 },
            0.0,
            MatMut { data: &mut ata, offset: 0, rs: 3, cs: 1 },
        );
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(ata[i * 3 + j], a[i] * a[j] + a[3 + i] * a[3 + j]);
            }
        }
    }
}
