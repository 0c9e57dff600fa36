//! Dense row-major tensors with a tape-based reverse-mode autodiff engine.
//!
//! Two precisions are supported through [`Scalar`]: `f32` for training
//! throughput and `f64` for the verification suites (gradient checks and the
//! hard-drop equivalence harness).

mod gradcheck;
mod graph;
pub mod kernels;
mod optim;
mod params;

pub use gradcheck::{gradient_check, GradCheckOptions, GradCheckReport};
pub use graph::{Degenerate, Gradients, Graph, Var};
pub use optim::{AdamW, AdamWConfig, LinearSchedule};
pub use params::{ParamId, ParamStore, Parameter};

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{DotError, Result};

/// Floating point precision of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn as_str(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = DotError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(DotError::Config(format!("unknown precision `{other}`"))),
        }
    }
}

/// Element type of tensors. Implemented for `f32` and `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    const PRECISION: Precision;
    const BYTES: usize;

    /// `c = alpha * a * b + beta * c` with arbitrary strides.
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

    fn erf(self) -> Self;

    fn write_le(self, out: &mut Vec<u8>);

    fn read_le(bytes: &[u8]) -> Self;

    #[inline]
    fn c(v: f64) -> Self {
        Self::from_f64(v).expect("constant representable")
    }
}

impl Scalar for f32 {
    const PRECISION: Precision = Precision::F32;
    const BYTES: usize = 4;

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: &[f32],
        rsa: isize,
        csa: isize,
        b: &[f32],
        rsb: isize,
        csb: isize,
        beta: f32,
        c: &mut [f32],
        rsc: isize,
        csc: isize,
    ) {
        if m == 0 || n == 0 {
            return;
        }
        // SAFETY: callers pass slices whose extents cover the strided views;
        // checked by the debug assertions in `kernels::gemm_checked`.
        unsafe {
            matrixmultiply::sgemm(
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
            )
        }
    }

    fn erf(self) -> f32 {
        libm::erff(self)
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f32 {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const PRECISION: Precision = Precision::F64;
    const BYTES: usize = 8;

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: &[f64],
        rsa: isize,
        csa: isize,
        b: &[f64],
        rsb: isize,
        csb: isize,
        beta: f64,
        c: &mut [f64],
        rsc: isize,
        csc: isize,
    ) {
        if m == 0 || n == 0 {
            return;
        }
        // SAFETY: see the f32 implementation.
        unsafe {
            matrixmultiply::dgemm(
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
            )
        }
    }

    fn erf(self) -> f64 {
        libm::erf(self)
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f64 {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// A plain dense tensor. Graph-free; see [`Graph`] for differentiable use.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(DotError::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![T::zero(); numel],
        }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(DotError::Contract("ragged rows".into()));
        }
        Ok(Tensor {
            shape: vec![rows.len(), cols],
            data: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn vector(data: Vec<T>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rows(&self) -> usize {
        kernels::dims2(&self.shape).0
    }

    pub fn cols(&self) -> usize {
        kernels::dims2(&self.shape).1
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols() + j]
    }

    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, k) = kernels::dims2(&self.shape);
        let (k2, n) = kernels::dims2(&other.shape);
        if self.shape.len() != 2 || other.shape.len() != 2 || k != k2 {
            return Err(DotError::Shape {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_into(&self.data, &other.data, &mut out, m, k, n, false, T::one(), T::zero());
        Tensor::new(vec![m, n], out)
    }

    pub fn softmax_rows(&self) -> Result<Tensor<T>> {
        let (m, n) = kernels::dims2(&self.shape);
        let mut out = self.data.clone();
        kernels::softmax_rows_inplace(&mut out, m, n, Degenerate::Error)?;
        Tensor::new(self.shape.clone(), out)
    }

    pub fn gelu(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| kernels::gelu(x)).collect(),
        }
    }
}

/// Layer normalization of a single vector: `gain * (x - mean) / sqrt(var + eps) + bias`.
pub fn layer_norm<T: Scalar>(x: &[T], gain: &[T], bias: &[T], eps: T) -> Result<Vec<T>> {
    if x.is_empty() || gain.len() != x.len() || bias.len() != x.len() {
        return Err(DotError::Shape {
            op: "layer_norm",
            lhs: vec![x.len()],
            rhs: vec![gain.len(), bias.len()],
        });
    }
    let mut out = vec![T::zero(); x.len()];
    kernels::layer_norm_row(x, gain, bias, eps, &mut out);
    Ok(out)
}

/// Cross-entropy between softmax(logits) and a target distribution.
pub fn cross_entropy<T: Scalar>(logits: &[T], target: &[T]) -> Result<T> {
    if logits.len() != target.len() || logits.is_empty() {
        return Err(DotError::Shape {
            op: "cross_entropy",
            lhs: vec![logits.len()],
            rhs: vec![target.len()],
        });
    }
    let total: T = target.iter().copied().sum();
    if target.iter().any(|&t| t < T::zero() || !t.is_finite())
        || (total - T::one()).abs() > T::c(1e-6)
    {
        return Err(DotError::Contract(
            "cross_entropy target must be a probability distribution".into(),
        ));
    }
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<T>().ln();
    Ok(logits
        .iter()
        .zip(target)
        .filter(|(_, &t)| t > T::zero())
        .map(|(&z, &t)| -t * (z - lse))
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for l in 0..k {
                    c[i * n + j] += a[i * k + l] * b[l * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let b = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(Tensor::<f64>::identity(2).matmul(&b).unwrap(), b);
        let a = Tensor::from_rows(&[vec![2.0]]).unwrap();
        let c = Tensor::from_rows(&[vec![3.0]]).unwrap();
        assert_eq!(a.matmul(&c).unwrap().data(), &[6.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let expected = naive_matmul(&a, &b, 4, 5, 3);
        let got = Tensor::new(vec![4, 5], a)
            .unwrap()
            .matmul(&Tensor::new(vec![5, 3], b).unwrap())
            .unwrap();
        for (g, e) in got.data().iter().zip(&expected) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f64>::zeros(vec![2, 3]);
        let b = Tensor::<f64>::zeros(vec![2, 3]);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("matmul"), "{err}");
    }

    #[test]
    fn softmax_examples() {
        let t = Tensor::from_rows(&[vec![0.0, 0.0, 0.0]]).unwrap().softmax_rows().unwrap();
        for &p in t.data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let t = Tensor::from_rows(&[vec![0.0, f64::NEG_INFINITY]])
            .unwrap()
            .softmax_rows()
            .unwrap();
        assert_eq!(t.data(), &[1.0, 0.0]);

        let z = [1.0f64, 2.0, 3.0];
        let denom: f64 = z.iter().map(|v| v.exp()).sum();
        let t = Tensor::from_rows(&[z.to_vec()]).unwrap().softmax_rows().unwrap();
        for (p, v) in t.data().iter().zip(z) {
            assert!((p - v.exp() / denom).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_all_masked_row_is_an_error() {
        let t = Tensor::from_rows(&[vec![0.0, 1.0], vec![f64::NEG_INFINITY; 2]]).unwrap();
        assert!(matches!(t.softmax_rows(), Err(DotError::DegenerateRow { row: 1 })));
    }

    #[test]
    fn layer_norm_examples() {
        let out = layer_norm(&[3.0f64; 4], &[1.0; 4], &[0.0; 4], 1e-12).unwrap();
        assert!(out.iter().all(|v| v.abs() < 1e-9));
        let out = layer_norm(&[1.0f64, -1.0], &[1.0; 2], &[0.0; 2], 0.0).unwrap();
        assert!((out[0] - 1.0).abs() < 1e-15 && (out[1] + 1.0).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..9).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let g: Vec<f64> = (0..9).map(|_| rng.gen_range(0.5..1.5)).collect();
        let b: Vec<f64> = (0..9).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let eps = 1e-12;
        let mean = x.iter().sum::<f64>() / 9.0;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 9.0;
        let out = layer_norm(&x, &g, &b, eps).unwrap();
        for i in 0..9 {
            let e = g[i] * (x[i] - mean) / (var + eps).sqrt() + b[i];
            assert!((out[i] - e).abs() < 1e-10);
        }
    }

    #[test]
    fn gelu_and_cross_entropy() {
        assert_eq!(kernels::gelu(0.0f64), 0.0);
        let n = 5;
        let ce = cross_entropy(&vec![0.3f64; n], &vec![1.0 / n as f64; n]).unwrap();
        assert!((ce - (n as f64).ln()).abs() < 1e-12);
        assert!(matches!(
            cross_entropy(&[0.0f64, 0.0], &[0.7, 0.7]),
            Err(DotError::Contract(_))
        ));
    }
}
