use std::cell::Cell;
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

thread_local! {
    static MAC_COUNTER: Cell<u64> = const { Cell::new(0) };
}

/// Multiply-accumulate operations issued by [`Scalar::gemm`] on this thread.
pub fn mac_count() -> u64 {
    MAC_COUNTER.with(|c| c.get())
}

pub fn reset_mac_count() {
    MAC_COUNTER.with(|c| c.set(0));
}

fn record_macs(n: u64) {
    MAC_COUNTER.with(|c| c.set(c.get().wrapping_add(n)));
}

/// Strided view of a row-major matrix operand.
#[derive(Debug, Clone, Copy)]
pub struct MatView<'a, S> {
    pub data: &'a [S],
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a, S> MatView<'a, S> {
    pub fn row_major(data: &'a [S], cols: usize) -> Self {
        Self { data, row_stride: cols, col_stride: 1 }
    }

    /// View of the transpose of a row-major `rows x cols` matrix.
    pub fn transposed(data: &'a [S], cols: usize) -> Self {
        Self { data, row_stride: 1, col_stride: cols }
    }

    fn span(&self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * self.row_stride + (cols - 1) * self.col_stride + 1
        }
    }
}

/// Real scalar usable by every kernel in the crate.
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
    /// `c (m x n) = a (m x k) · b (k x n) + (accumulate ? c : 0)`, row-major `c`.
    ///
    /// The blocking and loop order are fixed, so identical inputs give
    /// bit-identical outputs on one host.
    fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: MatView<'_, Self>,
        b: MatView<'_, Self>,
        c: &mut [Self],
        accumulate: bool,
    );

    /// Lossless for `f64`, nearest for narrower types.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

fn check_extents<S>(m: usize, k: usize, n: usize, a: &MatView<'_, S>, b: &MatView<'_, S>, c: &[S]) {
    assert!(a.span(m, k) <= a.data.len(), "gemm: lhs view out of bounds");
    assert!(b.span(k, n) <= b.data.len(), "gemm: rhs view out of bounds");
    assert!(m * n <= c.len(), "gemm: output too small");
}

macro_rules! impl_scalar {
    ($t:ty, $kernel:path) => {
        impl Scalar for $t {
            fn gemm_raw(
                m: usize,
                k: usize,
                n: usize,
                a: MatView<'_, Self>,
                b: MatView<'_, Self>,
                c: &mut [Self],
                accumulate: bool,
            ) {
                check_extents(m, k, n, &a, &b, c);
                record_macs((m * k * n) as u64);
                if m == 0 || n == 0 {
                    return;
                }
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: extents checked above; matrixmultiply reads within
                // `span` of each operand and writes m*n elements of `c`.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        1.0,
                        a.data.as_ptr(),
                        a.row_stride as isize,
                        a.col_stride as isize,
                        b.data.as_ptr(),
                        b.row_stride as isize,
                        b.col_stride as isize,
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

impl_scalar!(f64, matrixmultiply::dgemm);
impl_scalar!(f32, matrixmultiply::sgemm);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_counts_macs() {
        reset_mac_count();
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let mut c = [0.0; 4];
        f64::gemm_raw(2, 2, 2, MatView::row_major(&a, 2), MatView::row_major(&a, 2), &mut c, false);
        assert_eq!(mac_count(), 8);
        assert_eq!(c, [7.0, 10.0, 15.0, 22.0]);
    }

    #[test]
    fn transposed_view() {
        // a = [[1,2,3]], a·aᵀ = 14
        let a = [1.0f32, 2.0, 3.0];
        let mut c = [0.0f32];
        f32::gemm_raw(1, 3, 1, MatView::row_major(&a, 3), MatView::transposed(&a, 3), &mut c, false);
        assert_eq!(c[0], 14.0);
    }
}
