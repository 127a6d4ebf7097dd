//! Free-standing forward operations.
//!
//! These share the kernels with the tape, so a tape-built forward pass and a
//! direct call produce bit-identical values.

use super::{kernels, Scalar, Tensor};
use crate::error::{Error, Result};

/// `y = x W + b`, broadcasting over the leading dimensions of `x`.
pub fn affine<F: Scalar>(x: &Tensor<F>, w: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let n = x.last_dim();
    if w.shape().len() != 2 || w.shape()[0] != n {
        return Err(Error::ShapeMismatch {
            op: "affine",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    let m = w.shape()[1];
    if b.shape() != [m] {
        return Err(Error::ShapeMismatch {
            op: "affine",
            lhs: w.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let rows = x.numel() / n;
    let mut data = kernels::matmul(x.data(), w.data(), rows, n, m);
    kernels::for_each_row(&mut data, m, |_, row| {
        for (v, &bias) in row.iter_mut().zip(b.data().iter()) {
            *v = *v + bias;
        }
    });
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("non-empty") = m;
    Tensor::new(shape, data)
}

/// Stable softmax along the last axis.
pub fn softmax<F: Scalar>(x: &Tensor<F>) -> Result<Tensor<F>> {
    let n = x.last_dim();
    if n < 1 {
        return Err(Error::InvalidShape {
            op: "softmax",
            shape: x.shape().to_vec(),
            reason: "last axis must be non-empty".into(),
        });
    }
    Tensor::new(x.shape().to_vec(), kernels::softmax_rows(x.data(), n))
}

/// Layer normalization along the last axis.
pub fn layer_norm<F: Scalar>(
    x: &Tensor<F>,
    gamma: &Tensor<F>,
    beta: &Tensor<F>,
    eps: F,
) -> Result<Tensor<F>> {
    let n = x.last_dim();
    if n < 2 {
        return Err(Error::InvalidShape {
            op: "layer_norm",
            shape: x.shape().to_vec(),
            reason: "last axis must have at least 2 elements".into(),
        });
    }
    if gamma.shape() != [n] || beta.shape() != [n] {
        return Err(Error::ShapeMismatch {
            op: "layer_norm",
            lhs: x.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    Tensor::new(
        x.shape().to_vec(),
        kernels::layer_norm_rows(x.data(), n, gamma.data(), beta.data(), eps),
    )
}

/// The model nonlinearity: tanh-approximation GELU, elementwise.
pub fn activation<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    x.map(kernels::gelu)
}

/// Elementwise derivative of [`activation`].
pub fn activation_grad<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    x.map(kernels::gelu_grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::derive_rng;
    use rand::Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn affine_identity() {
        let x = t(&[1, 2], &[1.0, 0.0]);
        let w = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let b = t(&[2], &[0.0, 0.0]);
        let y = affine(&x, &w, &b).unwrap();
        assert_eq!(y.data(), &[1.0, 0.0]);
    }

    #[test]
    fn affine_hand_computed() {
        let x = t(&[1, 2], &[1.0, 1.0]);
        let w = t(&[2, 2], &[2.0, 0.0, 0.0, 3.0]);
        let b = t(&[2], &[1.0, 1.0]);
        let y = affine(&x, &w, &b).unwrap();
        assert_eq!(y.data(), &[3.0, 4.0]);
    }

    #[test]
    fn affine_matches_triple_loop_oracle() {
        let mut rng = derive_rng(11, &[0]);
        let (r, n, m) = (4, 5, 3);
        let x = Tensor::<f64>::from_fn(&[r, n], |_| rng.random::<f64>() * 2.0 - 1.0);
        let w = Tensor::<f64>::from_fn(&[n, m], |_| rng.random::<f64>() * 2.0 - 1.0);
        let b = Tensor::<f64>::from_fn(&[m], |_| rng.random::<f64>() * 2.0 - 1.0);
        let y = affine(&x, &w, &b).unwrap();

        // Naive sum-of-products oracle.
        for i in 0..r {
            for j in 0..m {
                let mut acc = b.data()[j];
                for p in 0..n {
                    acc += x.data()[i * n + p] * w.data()[p * m + j];
                }
                assert!((y.data()[i * m + j] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn affine_reports_shape_mismatch() {
        let x = t(&[1, 3], &[0.0; 3]);
        let w = t(&[2, 2], &[0.0; 4]);
        let b = t(&[2], &[0.0; 2]);
        let err = affine(&x, &w, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn softmax_symmetry() {
        let y = softmax(&t(&[4], &[0.0; 4])).unwrap();
        for &v in y.data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_matches_direct_definition() {
        let mut rng = derive_rng(13, &[1]);
        let x = Tensor::<f64>::from_fn(&[3, 7], |_| rng.random::<f64>() * 6.0 - 3.0);
        let y = softmax(&x).unwrap();
        for r in 0..3 {
            let row = &x.data()[r * 7..(r + 1) * 7];
            let denom: f64 = row.iter().map(|v| v.exp()).sum();
            for j in 0..7 {
                let expect = row[j].exp() / denom;
                assert!((y.data()[r * 7 + j] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_constant_row_maps_to_beta() {
        let x = t(&[1, 4], &[5.0; 4]);
        let gamma = t(&[4], &[1.0; 4]);
        let beta = t(&[4], &[0.0; 4]);
        let y = layer_norm(&x, &gamma, &beta, 1e-6).unwrap();
        for &v in y.data() {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_already_normalized_vector() {
        let x = t(&[1, 2], &[1.0, -1.0]);
        let gamma = t(&[2], &[1.0, 1.0]);
        let beta = t(&[2], &[0.0, 0.0]);
        let y = layer_norm(&x, &gamma, &beta, 1e-6).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-6);
        assert!((y.data()[1] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_moment_check() {
        let mut rng = derive_rng(17, &[2]);
        let n = 16;
        let x = Tensor::<f64>::from_fn(&[8, n], |_| rng.random::<f64>() * 10.0 - 5.0);
        let gamma = Tensor::<f64>::ones(&[n]);
        let beta = Tensor::<f64>::zeros(&[n]);
        let y = layer_norm(&x, &gamma, &beta, 1e-6).unwrap();
        for r in 0..8 {
            let row = &y.data()[r * n..(r + 1) * n];
            let mean: f64 = row.iter().sum::<f64>() / n as f64;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            assert!(mean.abs() < 1e-10, "row {r} mean {mean}");
            assert!((var - 1.0).abs() < 1e-6, "row {r} var {var}");
        }
    }

    #[test]
    fn activation_fixed_points_and_asymptotes() {
        let x = t(&[3], &[0.0, 30.0, -30.0]);
        let y = activation(&x);
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 30.0).abs() < 1e-9);
        assert!(y.data()[2].abs() < 1e-9);
    }

    #[test]
    fn activation_is_monotone_right_of_its_minimum() {
        // The GELU family is not globally monotone: it dips to a minimum
        // near x = -0.75 and only increases from there on.
        let steps = 2000;
        let mut prev = f64::NEG_INFINITY;
        for i in 0..=steps {
            let x = -0.7 + 5.7 * i as f64 / steps as f64;
            let y = activation(&Tensor::scalar(x)).data()[0];
            assert!(y >= prev, "non-monotone at x={x}");
            prev = y;
        }
    }

    #[test]
    fn activation_grad_matches_central_differences() {
        // Sampled over the post-layer-norm operating range; far in the left
        // tail the forward value itself loses digits to cancellation in
        // 1 + tanh(u), which caps what any difference quotient can resolve.
        let mut rng = derive_rng(19, &[3]);
        for _ in 0..50 {
            let x: f64 = rng.random::<f64>() * 6.0 - 3.0;
            let h = 1e-7;
            let fd = (activation(&Tensor::scalar(x + h)).data()[0]
                - activation(&Tensor::scalar(x - h)).data()[0])
                / (2.0 * h);
            let an = activation_grad(&Tensor::scalar(x)).data()[0];
            let rel = (an - fd).abs() / fd.abs().max(1e-9);
            assert!(rel < 1e-6, "x={x}: {an} vs {fd}");
        }
    }
}
