//! Slice-level numeric kernels shared by [`super::Tensor`] and the graph ops.

use super::{Degenerate, Scalar};
use crate::error::{DotError, Result};

/// Views a shape as a matrix. Rank-1 shapes are a single row.
pub fn dims2(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (1, *n),
        [rest @ .., n] => (rest.iter().product(), *n),
    }
}

/// `out = alpha * a * op(b) + beta * out` where `op(b)` is `b` (`k × n`) or,
/// with `trans_b`, the transpose of a row-major `n × k` matrix.
#[allow(clippy::too_many_arguments)]
pub fn matmul_into<T: Scalar>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    m: usize,
    k: usize,
    n: usize,
    trans_b: bool,
    alpha: T,
    beta: T,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && out.len() >= m * n);
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    T::gemm(m, k, n, alpha, a, k as isize, 1, b, rsb, csb, beta, out, n as isize, 1);
}

/// `out (k × n) += alpha * aᵀ * g` where `a` is `m × k` and `g` is `m × n`.
pub fn matmul_at_b_acc<T: Scalar>(a: &[T], g: &[T], out: &mut [T], m: usize, k: usize, n: usize, alpha: T) {
    T::gemm(k, m, n, alpha, a, 1, k as isize, g, n as isize, 1, T::one(), out, n as isize, 1);
}

/// `out (n × k) += alpha * gᵀ * a` where `g` is `m × n` and `a` is `m × k`.
pub fn matmul_gt_a_acc<T: Scalar>(g: &[T], a: &[T], out: &mut [T], m: usize, n: usize, k: usize, alpha: T) {
    T::gemm(n, m, k, alpha, g, 1, n as isize, a, k as isize, 1, T::one(), out, k as isize, 1);
}

pub fn softmax_rows_inplace<T: Scalar>(x: &mut [T], m: usize, n: usize, degenerate: Degenerate) -> Result<()> {
    for r in 0..m {
        let row = &mut x[r * n..(r + 1) * n];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        if max == T::neg_infinity() || max.is_nan() {
            match degenerate {
                Degenerate::Error => return Err(DotError::DegenerateRow { row: r }),
                Degenerate::Zero => {
                    row.iter_mut().for_each(|v| *v = T::zero());
                    continue;
                }
            }
        }
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = T::one() / sum;
        row.iter_mut().for_each(|v| *v *= inv);
    }
    Ok(())
}

/// Normalizes one row; returns `1 / sqrt(var + eps)`.
pub fn layer_norm_row<T: Scalar>(x: &[T], gain: &[T], bias: &[T], eps: T, out: &mut [T]) -> T {
    let n = T::from_usize(x.len()).unwrap();
    let mean = x.iter().copied().sum::<T>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let inv_std = T::one() / (var + eps).sqrt();
    for i in 0..x.len() {
        out[i] = gain[i] * (x[i] - mean) * inv_std + bias[i];
    }
    inv_std
}

/// Exact (erf-based) GELU.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let half = T::c(0.5);
    half * x * (T::one() + (x * T::c(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let cdf = T::c(0.5) * (T::one() + (x * T::c(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * T::c(0.5)).exp() * T::c(0.398_942_280_401_432_7);
    cdf + x * pdf
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `log(sigmoid(x))` without overflow for large `|x|`.
#[inline]
pub fn log_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Binary cross-entropy of a logit against a target in `[0, 1]`.
#[inline]
pub fn bce_with_logit<T: Scalar>(z: T, y: T) -> T {
    // -[y log σ(z) + (1-y) log σ(-z)]
    -(y * log_sigmoid(z) + (T::one() - y) * log_sigmoid(-z))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_sigmoid_limits_are_stable() {
        assert!((log_sigmoid(0.0f64) - 0.5f64.ln()).abs() < 1e-15);
        for &z in &[-50.0f64, -20.0, 20.0, 50.0] {
            let v = log_sigmoid(z);
            assert!(v.is_finite() && v <= 0.0);
        }
        assert!(log_sigmoid(50.0f64) > -1e-20);
        assert!((log_sigmoid(-50.0f64) + 50.0).abs() < 1e-12);
        let v = log_sigmoid(-50.0f32);
        assert!(v.is_finite());
    }

    #[test]
    fn gelu_grad_matches_central_difference() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn transposed_products_agree_with_explicit_transpose() {
        // a: 2x3, b stored as 4x3 (transposed use), g: 2x4
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0f64, 0.0, 2.0, 0.5, 1.0, 0.0, 3.0, 1.0, 1.0, 0.0, 0.0, 1.0];
        let mut c = [0.0f64; 8];
        matmul_into(&a, &b, &mut c, 2, 3, 4, true, 1.0, 0.0);
        for i in 0..2 {
            for j in 0..4 {
                let e: f64 = (0..3).map(|l| a[i * 3 + l] * b[j * 3 + l]).sum();
                assert_eq!(c[i * 4 + j], e);
            }
        }
        let mut at_g = [0.0f64; 12];
        matmul_at_b_acc(&a, &c, &mut at_g, 2, 3, 4, 1.0);
        for i in 0..3 {
            for j in 0..4 {
                let e: f64 = (0..2).map(|r| a[r * 3 + i] * c[r * 4 + j]).sum();
                assert!((at_g[i * 4 + j] - e).abs() < 1e-12);
            }
        }
        let mut gt_a = [0.0f64; 12];
        matmul_gt_a_acc(&c, &a, &mut gt_a, 2, 4, 3, 1.0);
        for i in 0..4 {
            for j in 0..3 {
                let e: f64 = (0..2).map(|r| c[r * 4 + i] * a[r * 3 + j]).sum();
                assert!((gt_a[i * 3 + j] - e).abs() < 1e-12);
            }
        }
    }
}
