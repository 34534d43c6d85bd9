//! Scalar abstraction shared by every numeric routine in the crate.
//!
//! Training runs in `f32`; finite-difference gradient checks and most
//! oracles run in `f64`. Both go through the same generic code paths.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point scalar: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// General matrix multiply `C = alpha * A * B + beta * C` with arbitrary
    /// row/column strides (in elements).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    #[inline]
    fn c(x: f64) -> Self {
        Self::from_f64(x).expect("f64 constant representable")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            #[inline]
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                if m <= THIN || k <= THIN {
                    thin_gemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
                    return;
                }
                debug_assert!(a.len() >= span(m, k, rsa, csa));
                debug_assert!(b.len() >= span(k, n, rsb, csb));
                debug_assert!(c.len() >= span(m, n, rsc, csc));
                // SAFETY: the slices cover every index addressed by the
                // (rows, cols, strides) triples, checked above in debug builds
                // and guaranteed by the callers in `tensor`.
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
                        rsc,
                        csc,
                    );
                }
            }
        }
    };
}

/// Below this inner or outer size the packing done by `matrixmultiply`
/// costs more than the multiply itself.
const THIN: usize = 4;

#[allow(clippy::too_many_arguments)]
fn thin_gemm<T: Float + NumAssign>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    rsa: isize,
    csa: isize,
    b: &[T],
    rsb: isize,
    csb: isize,
    beta: T,
    c: &mut [T],
    rsc: isize,
    csc: isize,
) {
    if csa == 1 && rsb == 1 {
        // both operands contiguous along k: dot products
        for i in 0..m {
            let ar = &a[i * rsa as usize..i * rsa as usize + k];
            for j in 0..n {
                let br = &b[j * csb as usize..j * csb as usize + k];
                let mut acc = [T::zero(); 8];
                let (ac, at) = ar.split_at(k - k % 8);
                let (bc, bt) = br.split_at(k - k % 8);
                for (x, y) in ac.chunks_exact(8).zip(bc.chunks_exact(8)) {
                    for l in 0..8 {
                        acc[l] += x[l] * y[l];
                    }
                }
                let mut dot = acc.iter().fold(T::zero(), |s, &v| s + v);
                for (&x, &y) in at.iter().zip(bt) {
                    dot += x * y;
                }
                let idx = (i as isize * rsc + j as isize * csc) as usize;
                c[idx] = alpha * dot + if beta == T::zero() { T::zero() } else { c[idx] * beta };
            }
        }
        return;
    }
    for i in 0..m {
        let ci = i as isize * rsc;
        for j in 0..n {
            let idx = (ci + j as isize * csc) as usize;
            c[idx] = if beta == T::zero() { T::zero() } else { c[idx] * beta };
        }
        for p in 0..k {
            let aip = alpha * a[(i as isize * rsa + p as isize * csa) as usize];
            if aip == T::zero() {
                continue;
            }
            let bp = p as isize * rsb;
            if csb == 1 && csc == 1 {
                let (b0, c0) = (bp as usize, ci as usize);
                for (cv, &bv) in c[c0..c0 + n].iter_mut().zip(&b[b0..b0 + n]) {
                    *cv += aip * bv;
                }
            } else {
                for j in 0..n {
                    c[(ci + j as isize * csc) as usize] += aip * b[(bp + j as isize * csb) as usize];
                }
            }
        }
    }
}

#[allow(dead_code)]
fn span(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    ((rows - 1) as isize * rs + (cols - 1) as isize * cs) as usize + 1
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_including_transposed_strides() {
        for (m, k, n) in [(3, 5, 4), (7, 9, 6), (1, 20, 8), (12, 2, 9)] {
            gemm_case(m, k, n);
        }
    }

    fn gemm_case(m: usize, k: usize, n: usize) {
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let expect = naive(m, k, n, &a, &b);
        let mut c = vec![0.0; m * n];
        f64::gemm(m, k, n, 1.0, &a, k as isize, 1, &b, n as isize, 1, 0.0, &mut c, n as isize, 1);
        for (x, y) in c.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }
        // A^T stored, B^T stored: contiguous along k on both sides
        let at: Vec<f64> = (0..k * m).map(|i| a[(i % m) * k + i / m]).collect();
        let bt: Vec<f64> = (0..n * k).map(|i| b[(i % k) * n + i / k]).collect();
        let mut c2 = vec![1.0; m * n];
        f64::gemm(m, k, n, 2.0, &a, k as isize, 1, &bt, 1, k as isize, 0.5, &mut c2, n as isize, 1);
        for (x, y) in c2.iter().zip(&expect) {
            assert!((x - (2.0 * y + 0.5)).abs() < 1e-12);
        }
        let mut c3 = vec![0.0; m * n];
        f64::gemm(m, k, n, 1.0, &at, 1, m as isize, &b, n as isize, 1, 0.0, &mut c3, n as isize, 1);
        for (x, y) in c3.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }
        // C^T = B^T A^T, written through strides
        let mut ct = vec![0.0; n * m];
        f64::gemm(n, k, m, 1.0, &b, 1, n as isize, &a, 1, k as isize, 0.0, &mut ct, m as isize, 1);
        for i in 0..m {
            for j in 0..n {
                assert!((ct[j * m + i] - expect[i * n + j]).abs() < 1e-12);
            }
        }
    }
}
