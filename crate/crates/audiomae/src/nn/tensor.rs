//! Dense row-major tensors over an abstract scalar, plus process-wide
//! accounting of live tensor bytes (used by the benchmark to report peak
//! memory).

use std::fmt;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};
use std::sync::atomic::{AtomicUsize, Ordering};

/// Scalar type a [`Tensor`] can hold. `f32` is the training/benchmark grade,
/// `f64` the verification grade used by gradient checks and oracle tests.
pub trait Element:
    Copy
    + Send
    + Sync
    + PartialOrd
    + fmt::Debug
    + fmt::Display
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + 'static
{
    const DTYPE: &'static str;
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn is_finite_e(self) -> bool;
    fn exp_e(self) -> Self;
    fn ln_e(self) -> Self;
    fn sqrt_e(self) -> Self;
    fn tanh_e(self) -> Self;
    fn abs_e(self) -> Self;
    fn max_e(self, other: Self) -> Self;

    /// C := alpha·A·B + beta·C with explicit (row, col) strides per operand;
    /// `c` is row-major m×n. Strides express plain, transposed, or otherwise
    /// strided reads of the underlying buffers.
    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        sa: (isize, isize),
        b: &[Self],
        sb: (isize, isize),
        beta: Self,
        c: &mut [Self],
    );
}

macro_rules! impl_element {
    ($t:ty, $name:expr, $gemm:path) => {
        impl Element for $t {
            const DTYPE: &'static str = $name;
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;

            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn is_finite_e(self) -> bool {
                self.is_finite()
            }
            #[inline]
            fn exp_e(self) -> Self {
                self.exp()
            }
            #[inline]
            fn ln_e(self) -> Self {
                self.ln()
            }
            #[inline]
            fn sqrt_e(self) -> Self {
                self.sqrt()
            }
            #[inline]
            fn tanh_e(self) -> Self {
                self.tanh()
            }
            #[inline]
            fn abs_e(self) -> Self {
                self.abs()
            }
            #[inline]
            fn max_e(self, other: Self) -> Self {
                if self > other {
                    self
                } else {
                    other
                }
            }

            fn gemm_strided(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                (rsa, csa): (isize, isize),
                b: &[Self],
                (rsb, csb): (isize, isize),
                beta: Self,
                c: &mut [Self],
            ) {
                assert_eq!(c.len(), m * n, "gemm: out length");
                // Highest linear index each operand's strides can reach must
                // stay inside its buffer.
                let max_idx = |rows: usize, cols: usize, rs: isize, cs: isize| {
                    (rows as isize - 1).max(0) * rs.max(-rs)
                        + (cols as isize - 1).max(0) * cs.max(-cs)
                };
                assert!(
                    m == 0 || k == 0 || max_idx(m, k, rsa, csa) < a.len() as isize,
                    "gemm: lhs strides out of range"
                );
                assert!(
                    k == 0 || n == 0 || max_idx(k, n, rsb, csb) < b.len() as isize,
                    "gemm: rhs strides out of range"
                );
                // SAFETY: bounds checked above; output is contiguous row-major.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
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

impl_element!(f32, "f32", matrixmultiply::sgemm);
impl_element!(f64, "f64", matrixmultiply::dgemm);

/// Process-wide live/peak tensor byte accounting.
pub mod mem {
    use super::*;

    static LIVE: AtomicUsize = AtomicUsize::new(0);
    static PEAK: AtomicUsize = AtomicUsize::new(0);

    pub(super) fn on_alloc(bytes: usize) {
        let live = LIVE.fetch_add(bytes, Ordering::Relaxed) + bytes;
        PEAK.fetch_max(live, Ordering::Relaxed);
    }

    pub(super) fn on_free(bytes: usize) {
        LIVE.fetch_sub(bytes, Ordering::Relaxed);
    }

    /// Bytes held by all currently-live tensors.
    pub fn live_bytes() -> usize {
        LIVE.load(Ordering::Relaxed)
    }

    /// High-water mark of [`live_bytes`] since the last [`reset_peak`].
    pub fn peak_bytes() -> usize {
        PEAK.load(Ordering::Relaxed)
    }

    /// Reset the peak to the current live count.
    pub fn reset_peak() {
        PEAK.store(LIVE.load(Ordering::Relaxed), Ordering::Relaxed);
    }
}

/// Dense row-major tensor. Rank 1 and 2 are the only ranks used.
pub struct Tensor<E: Element> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Element> Tensor<E> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_vec(shape, vec![E::ZERO; shape.iter().product()])
    }

    pub fn filled(shape: &[usize], v: E) -> Self {
        Self::from_vec(shape, vec![v; shape.iter().product()])
    }

    /// Panics if `data.len()` does not match the shape product.
    pub fn from_vec(shape: &[usize], data: Vec<E>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            data.len(),
            numel,
            "tensor data length {} != shape {:?}",
            data.len(),
            shape
        );
        mem::on_alloc(numel * std::mem::size_of::<E>());
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// (rows, cols) of a rank-2 tensor; panics on other ranks.
    pub fn dim2(&self) -> (usize, usize) {
        assert_eq!(
            self.shape.len(),
            2,
            "expected rank-2 tensor, got shape {:?}",
            self.shape
        );
        (self.shape[0], self.shape[1])
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> E {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[r * self.shape[1] + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut E {
        debug_assert_eq!(self.shape.len(), 2);
        &mut self.data[r * self.shape[1] + c]
    }

    pub fn row(&self, r: usize) -> &[E] {
        let (_, cols) = self.dim2();
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [E] {
        let (_, cols) = self.dim2();
        &mut self.data[r * cols..(r + 1) * cols]
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    /// Index of the first non-finite entry, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite_e())
    }

    pub fn add_assign(&mut self, other: &Tensor<E>) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += *b;
        }
    }

    pub fn scale_assign(&mut self, s: E) {
        for a in self.data.iter_mut() {
            *a = *a * s;
        }
    }

    /// Cast elementwise through f64.
    pub fn cast<T: Element>(&self) -> Tensor<T> {
        Tensor::from_vec(
            &self.shape,
            self.data.iter().map(|v| T::from_f64(v.to_f64())).collect(),
        )
    }
}

impl<E: Element> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Self::from_vec(&self.shape, self.data.clone())
    }
}

impl<E: Element> Drop for Tensor<E> {
    fn drop(&mut self) {
        mem::on_free(self.data.len() * std::mem::size_of::<E>());
    }
}

impl<E: Element> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor<{}>{:?}", E::DTYPE, self.shape)
    }
}

/// A(m×k) · B(k×n), both row-major.
pub fn gemm_nn<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Tensor<E> {
    let (m, k) = a.dim2();
    let (k2, n) = b.dim2();
    assert_eq!(k, k2, "gemm_nn inner dims {} vs {}", k, k2);
    let mut c = Tensor::zeros(&[m, n]);
    E::gemm_strided(
        m,
        k,
        n,
        E::ONE,
        a.data(),
        (k as isize, 1),
        b.data(),
        (n as isize, 1),
        E::ZERO,
        c.data_mut(),
    );
    c
}

/// A(m×k) · B(n×k)ᵀ.
pub fn gemm_nt<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Tensor<E> {
    let (m, k) = a.dim2();
    let (n, k2) = b.dim2();
    assert_eq!(k, k2, "gemm_nt inner dims {} vs {}", k, k2);
    let mut c = Tensor::zeros(&[m, n]);
    E::gemm_strided(
        m,
        k,
        n,
        E::ONE,
        a.data(),
        (k as isize, 1),
        b.data(),
        (1, k as isize),
        E::ZERO,
        c.data_mut(),
    );
    c
}

/// A(k×m)ᵀ · B(k×n).
pub fn gemm_tn<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Tensor<E> {
    let (k, m) = a.dim2();
    let (k2, n) = b.dim2();
    assert_eq!(k, k2, "gemm_tn inner dims {} vs {}", k, k2);
    let mut c = Tensor::zeros(&[m, n]);
    E::gemm_strided(
        m,
        k,
        n,
        E::ONE,
        a.data(),
        (1, m as isize),
        b.data(),
        (n as isize, 1),
        E::ZERO,
        c.data_mut(),
    );
    c
}
