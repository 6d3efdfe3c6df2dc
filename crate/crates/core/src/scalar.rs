//! Floating-point abstraction so the same network runs in `f32` for
//! inference/training and in `f64` for gradient checking.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

pub trait Float:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    /// `c = a · b + beta · c` for strided row/column-major operands.
    ///
    /// `a` is `m × k`, `b` is `k × n`, `c` is `m × n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (usize, usize),
        b: &[Self],
        b_strides: (usize, usize),
        beta: Self,
        c: &mut [Self],
        c_strides: (usize, usize),
    );

    /// Shifted-tap multiply-accumulate, the inner loop of direct convolution.
    ///
    /// For every tap `t` and output row `o`:
    /// `out[o·out_stride ..][..len] += weights[o·taps + t] · src[offsets[t] ..][..len]`,
    /// where `taps = offsets.len()`.
    fn tap_accumulate(weights: &[Self], offsets: &[usize], src: &[Self], out: &mut [Self], out_stride: usize, len: usize);

    /// Weight-gradient counterpart of [`Float::tap_accumulate`]:
    /// `gw[o·taps + t] += Σ_i grad[o·grad_stride + i] · src[offsets[t] + i]` for `i < len`.
    fn tap_correlate(grad: &[Self], grad_stride: usize, len: usize, offsets: &[usize], src: &[Self], gw: &mut [Self]);

    fn lit(v: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(v).expect("f64 literal representable")
    }

    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

fn span(rows: usize, cols: usize, (rs, cs): (usize, usize)) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

#[inline(always)]
fn tap_accumulate_generic<T: Copy + std::ops::Mul<Output = T> + AddAssign>(
    weights: &[T],
    offsets: &[usize],
    src: &[T],
    out: &mut [T],
    out_stride: usize,
    len: usize,
) {
    let taps = offsets.len();
    let outs = weights.len() / taps.max(1);
    for (t, &off) in offsets.iter().enumerate() {
        let s = &src[off..off + len];
        for o in 0..outs {
            let w = weights[o * taps + t];
            let dst = &mut out[o * out_stride..o * out_stride + len];
            for (d, &x) in dst.iter_mut().zip(s) {
                *d += w * x;
            }
        }
    }
}

#[inline(always)]
fn dot_generic<T: Copy + Default + std::ops::Mul<Output = T> + AddAssign>(a: &[T], b: &[T]) -> T {
    const LANES: usize = 16;
    let mut acc = [T::default(); LANES];
    let (ac, bc) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let mut total = T::default();
    for v in acc {
        total += v;
    }
    for (&x, &y) in ar.iter().zip(br) {
        total += x * y;
    }
    total
}

#[inline(always)]
fn tap_correlate_generic<T: Copy + Default + std::ops::Mul<Output = T> + AddAssign>(
    grad: &[T],
    grad_stride: usize,
    len: usize,
    offsets: &[usize],
    src: &[T],
    gw: &mut [T],
) {
    let taps = offsets.len();
    let outs = gw.len() / taps.max(1);
    for (t, &off) in offsets.iter().enumerate() {
        let s = &src[off..off + len];
        for o in 0..outs {
            gw[o * taps + t] += dot_generic(&grad[o * grad_stride..o * grad_stride + len], s);
        }
    }
}

macro_rules! impl_float {
    ($t:ty, $gemm:path, $acc_avx:ident, $cor_avx:ident) => {
        #[cfg(target_arch = "x86_64")]
        #[target_feature(enable = "avx2,fma")]
        unsafe fn $acc_avx(weights: &[$t], offsets: &[usize], src: &[$t], out: &mut [$t], out_stride: usize, len: usize) {
            tap_accumulate_generic(weights, offsets, src, out, out_stride, len)
        }

        #[cfg(target_arch = "x86_64")]
        #[target_feature(enable = "avx2,fma")]
        unsafe fn $cor_avx(grad: &[$t], grad_stride: usize, len: usize, offsets: &[usize], src: &[$t], gw: &mut [$t]) {
            tap_correlate_generic(grad, grad_stride, len, offsets, src, gw)
        }

        impl Float for $t {
            fn tap_accumulate(weights: &[Self], offsets: &[usize], src: &[Self], out: &mut [Self], out_stride: usize, len: usize) {
                #[cfg(target_arch = "x86_64")]
                if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma") {
                    // SAFETY: the required CPU features were just detected.
                    return unsafe { $acc_avx(weights, offsets, src, out, out_stride, len) };
                }
                tap_accumulate_generic(weights, offsets, src, out, out_stride, len)
            }

            fn tap_correlate(grad: &[Self], grad_stride: usize, len: usize, offsets: &[usize], src: &[Self], gw: &mut [Self]) {
                #[cfg(target_arch = "x86_64")]
                if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma") {
                    // SAFETY: the required CPU features were just detected.
                    return unsafe { $cor_avx(grad, grad_stride, len, offsets, src, gw) };
                }
                tap_correlate_generic(grad, grad_stride, len, offsets, src, gw)
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_strides: (usize, usize),
                b: &[Self],
                b_strides: (usize, usize),
                beta: Self,
                c: &mut [Self],
                c_strides: (usize, usize),
            ) {
                assert!(span(m, k, a_strides) <= a.len(), "gemm: lhs out of bounds");
                assert!(span(k, n, b_strides) <= b.len(), "gemm: rhs out of bounds");
                assert!(span(m, n, c_strides) <= c.len(), "gemm: output out of bounds");
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every strided access is bounded by the span checks above
                // and `c` is exclusively borrowed.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        a_strides.0 as isize,
                        a_strides.1 as isize,
                        b.as_ptr(),
                        b_strides.0 as isize,
                        b_strides.1 as isize,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0 as isize,
                        c_strides.1 as isize,
                    );
                }
            }
        }
    };
}

impl_float!(f32, matrixmultiply::sgemm, tap_accumulate_avx_f32, tap_correlate_avx_f32);
impl_float!(f64, matrixmultiply::dgemm, tap_accumulate_avx_f64, tap_correlate_avx_f64);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_product() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5).collect(); // 3x4
        let mut c = vec![1.0; 8];
        f64::gemm(2, 3, 4, &a, (3, 1), &b, (4, 1), 1.0, &mut c, (4, 1));
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|p| a[i * 3 + p] * b[p * 4 + j]).sum::<f64>() + 1.0;
                assert_eq!(c[i * 4 + j], want);
            }
        }
    }

    #[test]
    fn gemm_transposed_operand() {
        // b stored as 4x3, used transposed
        let a = [1.0f32, 2.0, 3.0];
        let bt: Vec<f32> = (0..12).map(|v| v as f32).collect();
        let mut c = [0.0f32; 4];
        f32::gemm(1, 3, 4, &a, (3, 1), &bt, (1, 3), 0.0, &mut c, (4, 1));
        for j in 0..4 {
            let want: f32 = (0..3).map(|p| a[p] * bt[j * 3 + p]).sum();
            assert_eq!(c[j], want);
        }
    }
}
