//! Forward compute kernels shared by the tape and the free-standing ops.
//!
//! Row-parallel kernels keep each output row's inner loop sequential, so
//! results are bit-identical between the `parallel` feature and the
//! sequential fallback, and across thread counts.

use super::Scalar;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Work threshold (in multiply-adds) below which parallel dispatch is not
/// worth the fork-join overhead.
const PAR_WORK_THRESHOLD: usize = 1 << 16;

/// `A[m,k] * B[k,n] -> C[m,n]`, sequential.
pub fn matmul_seq<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    for (i, row) in out.chunks_mut(n).enumerate() {
        matmul_row(&a[i * k..(i + 1) * k], b, n, row);
    }
    out
}

/// `A[m,k] * B[k,n] -> C[m,n]`, one rayon task per output row.
#[cfg(feature = "parallel")]
pub fn matmul_par<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        matmul_row(&a[i * k..(i + 1) * k], b, n, row);
    });
    out
}

#[inline]
fn matmul_row<F: Scalar>(a_row: &[F], b: &[F], n: usize, out_row: &mut [F]) {
    for (p, &av) in a_row.iter().enumerate() {
        let b_row = &b[p * n..(p + 1) * n];
        for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
            *o = *o + av * bv;
        }
    }
}

/// Dispatching matmul: parallel over rows when the feature is enabled and
/// the work is large enough.
pub fn matmul<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    #[cfg(feature = "parallel")]
    {
        if m * k * n >= PAR_WORK_THRESHOLD && m > 1 {
            return matmul_par(a, b, m, k, n);
        }
    }
    matmul_seq(a, b, m, k, n)
}

/// Applies `f` to every row of a `[rows, width]` buffer in place.
pub fn for_each_row<F: Scalar>(
    data: &mut [F],
    width: usize,
    f: impl Fn(usize, &mut [F]) + Sync + Send,
) {
    #[cfg(feature = "parallel")]
    {
        if data.len() >= PAR_WORK_THRESHOLD && data.len() / width > 1 {
            data.par_chunks_mut(width)
                .enumerate()
                .for_each(|(i, row)| f(i, row));
            return;
        }
    }
    for (i, row) in data.chunks_mut(width).enumerate() {
        f(i, row);
    }
}

/// Elementwise map over a buffer.
pub fn map_buf<F: Scalar>(data: &[F], f: impl Fn(F) -> F + Sync + Send) -> Vec<F> {
    #[cfg(feature = "parallel")]
    {
        if data.len() >= PAR_WORK_THRESHOLD {
            return data.par_iter().map(|&v| f(v)).collect();
        }
    }
    data.iter().map(|&v| f(v)).collect()
}

/// Elementwise combine of two equally sized buffers.
pub fn zip_buf<F: Scalar>(a: &[F], b: &[F], f: impl Fn(F, F) -> F + Sync + Send) -> Vec<F> {
    debug_assert_eq!(a.len(), b.len());
    #[cfg(feature = "parallel")]
    {
        if a.len() >= PAR_WORK_THRESHOLD {
            return a
                .par_iter()
                .zip(b.par_iter())
                .map(|(&x, &y)| f(x, y))
                .collect();
        }
    }
    a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect()
}

/// Numerically stable softmax along rows of width `n` (max subtraction).
pub fn softmax_rows<F: Scalar>(data: &[F], n: usize) -> Vec<F> {
    let mut out = data.to_vec();
    for_each_row(&mut out, n, |_, row| {
        let mut max = row[0];
        for &v in row.iter() {
            if v > max {
                max = v;
            }
        }
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    });
    out
}

/// Per-row mean/variance normalization followed by the affine `gamma, beta`.
/// Variance is the population variance; constant rows map to `beta`.
pub fn layer_norm_rows<F: Scalar>(data: &[F], n: usize, gamma: &[F], beta: &[F], eps: F) -> Vec<F> {
    let mut out = data.to_vec();
    for_each_row(&mut out, n, |_, row| {
        let (mean, var) = row_moments(row);
        let inv = (var + eps).sqrt().recip();
        for (j, v) in row.iter_mut().enumerate() {
            *v = gamma[j] * ((*v - mean) * inv) + beta[j];
        }
    });
    out
}

pub(crate) fn row_moments<F: Scalar>(row: &[F]) -> (F, F) {
    let n = F::from_f64(row.len() as f64);
    let mut mean = F::zero();
    for &v in row.iter() {
        mean = mean + v;
    }
    mean = mean / n;
    let mut var = F::zero();
    for &v in row.iter() {
        let d = v - mean;
        var = var + d * d;
    }
    (mean, var / n)
}

/// Tanh-approximation GELU.
pub fn gelu<F: Scalar>(x: F) -> F {
    let half = F::from_f64(0.5);
    half * x * (F::one() + gelu_inner(x).tanh())
}

/// Derivative of the tanh-approximation GELU.
pub fn gelu_grad<F: Scalar>(x: F) -> F {
    let half = F::from_f64(0.5);
    let c = F::from_f64(SQRT_2_OVER_PI);
    let k = F::from_f64(GELU_CUBIC);
    let t = gelu_inner(x).tanh();
    let sech2 = F::one() - t * t;
    let du = c * (F::one() + F::from_f64(3.0) * k * x * x);
    half * (F::one() + t) + half * x * sech2 * du
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

#[inline]
fn gelu_inner<F: Scalar>(x: F) -> F {
    let c = F::from_f64(SQRT_2_OVER_PI);
    let k = F::from_f64(GELU_CUBIC);
    c * (x + k * x * x * x)
}

pub fn sigmoid<F: Scalar>(x: F) -> F {
    // Split on sign to avoid overflowing exp.
    if x >= F::zero() {
        (F::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// `B[k,n] -> B^T[n,k]`.
pub fn transpose<F: Scalar>(data: &[F], rows: usize, cols: usize) -> Vec<F> {
    let mut out = vec![F::zero(); data.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = data[i * cols + j];
        }
    }
    out
}
