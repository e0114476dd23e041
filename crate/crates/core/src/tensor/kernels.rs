//! Raw compute kernels, generic over `f32` (storage) and `f64` (shadow
//! evaluation for gradient checks).
//!
//! Convolutions are lowered to im2col + matmul so the hot loop is always the
//! unit-stride `j` loop of [`matmul`], which the compiler vectorizes.

/// The two element types the engine evaluates in.
pub trait Real: Copy + PartialOrd + std::fmt::Debug + Send + Sync + 'static {
    const ZERO: Self;
    const ONE: Self;
    fn from_f32(v: f32) -> Self;
    fn to_f64(self) -> f64;
    fn add(self, o: Self) -> Self;
    fn sub(self, o: Self) -> Self;
    fn mul(self, o: Self) -> Self;
    fn div(self, o: Self) -> Self;
    fn neg(self) -> Self;
    fn abs(self) -> Self;
    fn sqrt(self) -> Self;
    fn ln(self) -> Self;
    fn exp(self) -> Self;
    fn tanh(self) -> Self;
    fn max(self, o: Self) -> Self;
}

macro_rules! impl_real {
    ($t:ty) => {
        impl Real for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            #[inline(always)]
            fn from_f32(v: f32) -> Self {
                v as $t
            }
            #[inline(always)]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline(always)]
            fn add(self, o: Self) -> Self {
                self + o
            }
            #[inline(always)]
            fn sub(self, o: Self) -> Self {
                self - o
            }
            #[inline(always)]
            fn mul(self, o: Self) -> Self {
                self * o
            }
            #[inline(always)]
            fn div(self, o: Self) -> Self {
                self / o
            }
            #[inline(always)]
            fn neg(self) -> Self {
                -self
            }
            #[inline(always)]
            fn abs(self) -> Self {
                <$t>::abs(self)
            }
            #[inline(always)]
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            #[inline(always)]
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            #[inline(always)]
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            #[inline(always)]
            fn tanh(self) -> Self {
                <$t>::tanh(self)
            }
            #[inline(always)]
            fn max(self, o: Self) -> Self {
                <$t>::max(self, o)
            }
        }
    };
}

impl_real!(f32);
impl_real!(f64);

#[inline(always)]
pub fn sigmoid<T: Real>(x: T) -> T {
    T::ONE.div(T::ONE.add(x.neg().exp()))
}

/// c += a @ b, with a: [m x k], b: [k x n], c: [m x n].
pub fn matmul_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow.iter()) {
                *cv = cv.add(aik.mul(bv));
            }
        }
    }
}

/// c = a @ b (c is overwritten).
pub fn matmul<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    c.fill(T::ZERO);
    matmul_acc(a, b, c, m, k, n);
}

/// c += a @ b^T, with a: [m x k], b: [n x k], c: [m x n]. Used for dW = dY @ X^T.
pub fn matmul_bt_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::ZERO;
            for (&av, &bv) in arow.iter().zip(brow.iter()) {
                acc = acc.add(av.mul(bv));
            }
            crow[j] = crow[j].add(acc);
        }
    }
}

/// c += a^T @ b, with a: [m x k], b: [m x n], c: [k x n]. Used for dB = A^T @ dC.
pub fn matmul_at_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let crow = &mut c[kk * n..(kk + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow.iter()) {
                *cv = cv.add(av.mul(bv));
            }
        }
    }
}

/// Transpose a row-major [rows x cols] matrix into [cols x rows].
pub fn transpose<T: Real>(src: &[T], dst: &mut [T], rows: usize, cols: usize) {
    debug_assert_eq!(src.len(), rows * cols);
    debug_assert_eq!(dst.len(), rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}

/// im2col for 1-D convolution: src is [channels x len], dst is
/// [(channels * kernel) x frames] with frames = (len - kernel)/stride + 1.
///
/// dst[(c*kernel + k), t] = src[c, t*stride + k]
pub fn gather_windows<T: Real>(
    src: &[T],
    dst: &mut [T],
    channels: usize,
    len: usize,
    kernel: usize,
    stride: usize,
    frames: usize,
) {
    debug_assert_eq!(src.len(), channels * len);
    debug_assert_eq!(dst.len(), channels * kernel * frames);
    for c in 0..channels {
        let srow = &src[c * len..(c + 1) * len];
        for k in 0..kernel {
            let drow = &mut dst[(c * kernel + k) * frames..(c * kernel + k + 1) * frames];
            for (t, dv) in drow.iter_mut().enumerate() {
                *dv = srow[t * stride + k];
            }
        }
    }
}

/// Adjoint of [`gather_windows`]: scatter-add windows back onto the signal.
///
/// dst[c, t*stride + k] += src[(c*kernel + k), t]
pub fn scatter_windows_add<T: Real>(
    src: &[T],
    dst: &mut [T],
    channels: usize,
    len: usize,
    kernel: usize,
    stride: usize,
    frames: usize,
) {
    debug_assert_eq!(dst.len(), channels * len);
    debug_assert_eq!(src.len(), channels * kernel * frames);
    for c in 0..channels {
        let drow = &mut dst[c * len..(c + 1) * len];
        for k in 0..kernel {
            let srow = &src[(c * kernel + k) * frames..(c * kernel + k + 1) * frames];
            for (t, &sv) in srow.iter().enumerate() {
                let idx = t * stride + k;
                drow[idx] = drow[idx].add(sv);
            }
        }
    }
}

/// Sum with 64-bit accumulation.
pub fn sum_f64<T: Real>(xs: &[T]) -> f64 {
    xs.iter().fold(0.0f64, |acc, v| acc + v.to_f64())
}

pub fn dot_f64<T: Real>(a: &[T], b: &[T]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b.iter())
        .fold(0.0f64, |acc, (x, y)| acc + x.to_f64() * y.to_f64())
}
