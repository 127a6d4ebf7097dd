//! Training objective: MAE plus pairwise ranking loss over all batch pairs.
//!
//! The ranking term penalizes prediction pairs whose ordering disagrees
//! with the expected scores; agreement (or tied expectations) contributes
//! zero. The two terms are combined by plain summation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// How the `C(N,2)` pairwise terms are reduced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RankReduction {
    /// Mean keeps the loss magnitude batch-size independent (default).
    #[default]
    Mean,
    Sum,
}

/// Mean absolute error.
pub fn mae_loss(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    if y.len() != y_hat.len() || y.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "mae_loss",
            lhs: vec![y.len()],
            rhs: vec![y_hat.len()],
        });
    }
    Ok(y.iter()
        .zip(y_hat.iter())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / y.len() as f64)
}

/// Pairwise ranking loss for one pair of (predicted, expected) scores:
/// `max(0, -(yh1 - yh2)(y1 - y2) / (|yh1 - yh2| + eps))`.
pub fn pairwise_rank_loss(y1: f64, y2: f64, y_hat1: f64, y_hat2: f64, eps: f64) -> f64 {
    let expected_gap = y_hat1 - y_hat2;
    (-(expected_gap) * (y1 - y2) / (expected_gap.abs() + eps)).max(0.0)
}

/// Ranking loss over all `C(N, 2)` prediction pairs.
pub fn batch_rank_loss(
    y: &[f64],
    y_hat: &[f64],
    eps: f64,
    reduction: RankReduction,
) -> Result<f64> {
    if y.len() != y_hat.len() {
        return Err(Error::ShapeMismatch {
            op: "batch_rank_loss",
            lhs: vec![y.len()],
            rhs: vec![y_hat.len()],
        });
    }
    if y.len() < 2 {
        return Err(Error::Contract {
            op: "batch_rank_loss",
            reason: format!("need at least 2 predictions, got {}", y.len()),
        });
    }
    if eps <= 0.0 {
        return Err(Error::Contract {
            op: "batch_rank_loss",
            reason: "eps must be positive".into(),
        });
    }
    let n = y.len();
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            total += pairwise_rank_loss(y[i], y[j], y_hat[i], y_hat[j], eps);
        }
    }
    let pairs = (n * (n - 1) / 2) as f64;
    Ok(match reduction {
        RankReduction::Mean => total / pairs,
        RankReduction::Sum => total,
    })
}

/// `mae + rank`, combined by plain summation.
pub fn total_loss(y: &[f64], y_hat: &[f64], eps: f64, reduction: RankReduction) -> Result<f64> {
    Ok(mae_loss(y, y_hat)? + batch_rank_loss(y, y_hat, eps, reduction)?)
}

/// Differentiable MAE on the tape: `predictions` is a `[B, 1]` node,
/// `targets` a constant of the same length.
pub fn mae_loss_on<F: Scalar>(tape: &mut Tape<F>, predictions: Var, targets: &[F]) -> Result<Var> {
    let b = tape.value(predictions).numel();
    if b != targets.len() || b == 0 {
        return Err(Error::ShapeMismatch {
            op: "mae_loss",
            lhs: vec![b],
            rhs: vec![targets.len()],
        });
    }
    let shape = tape.value(predictions).shape().to_vec();
    let t = tape.leaf(Tensor::new(shape, targets.to_vec())?);
    let diff = tape.sub(predictions, t)?;
    let abs = tape.abs(diff);
    Ok(tape.mean_all(abs))
}

/// Differentiable batch ranking loss. The expected scores enter only
/// through constant per-pair coefficients, so the gradient flows purely
/// into the predictions:
/// each pair contributes `relu(c_ij * (y_i - y_j))` with
/// `c_ij = -(yh_i - yh_j) / (|yh_i - yh_j| + eps)`.
pub fn batch_rank_loss_on<F: Scalar>(
    tape: &mut Tape<F>,
    predictions: Var,
    targets: &[F],
    eps: f64,
    reduction: RankReduction,
) -> Result<Var> {
    let b = tape.value(predictions).numel();
    if b != targets.len() {
        return Err(Error::ShapeMismatch {
            op: "batch_rank_loss",
            lhs: vec![b],
            rhs: vec![targets.len()],
        });
    }
    if b < 2 {
        return Err(Error::Contract {
            op: "batch_rank_loss",
            reason: format!("need at least 2 predictions, got {b}"),
        });
    }
    let pairs = b * (b - 1) / 2;
    // Signed pair-difference matrix [pairs, B] and coefficient vector.
    let mut pair_matrix = vec![F::zero(); pairs * b];
    let mut coeffs = Vec::with_capacity(pairs);
    let mut k = 0;
    for i in 0..b {
        for j in i + 1..b {
            pair_matrix[k * b + i] = F::one();
            pair_matrix[k * b + j] = -F::one();
            let gap = targets[i].as_f64() - targets[j].as_f64();
            coeffs.push(F::from_f64(-gap / (gap.abs() + eps)));
            k += 1;
        }
    }
    let flat = tape.reshape(predictions, vec![b, 1])?;
    let p = tape.leaf(Tensor::new(vec![pairs, b], pair_matrix)?);
    let diffs = tape.matmul(p, flat)?;
    let c = tape.leaf(Tensor::new(vec![pairs, 1], coeffs)?);
    let scaled = tape.mul(diffs, c)?;
    let hinged = tape.relu(scaled);
    Ok(match reduction {
        RankReduction::Mean => tape.mean_all(hinged),
        RankReduction::Sum => tape.sum_all(hinged),
    })
}

/// Differentiable `mae + rank`.
pub fn total_loss_on<F: Scalar>(
    tape: &mut Tape<F>,
    predictions: Var,
    targets: &[F],
    eps: f64,
    reduction: RankReduction,
) -> Result<Var> {
    let mae = mae_loss_on(tape, predictions, targets)?;
    let rank = batch_rank_loss_on(tape, predictions, targets, eps, reduction)?;
    tape.add(mae, rank)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::derive_rng;
    use rand::Rng;

    #[test]
    fn mae_basics() {
        assert_eq!(mae_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mae_loss(&[0.0], &[2.0]).unwrap(), 2.0);
        assert!(mae_loss(&[1.0], &[1.0, 2.0]).is_err());

        let mut rng = derive_rng(1, &[1]);
        let a: Vec<f64> = (0..50).map(|_| rng.random::<f64>()).collect();
        let b: Vec<f64> = (0..50).map(|_| rng.random::<f64>()).collect();
        let oracle = a
            .iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
            / 50.0;
        assert!((mae_loss(&a, &b).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn pairwise_rank_loss_sign_cases() {
        // Agreement: clamped to zero.
        assert_eq!(pairwise_rank_loss(2.0, 1.0, 2.0, 1.0, 1e-6), 0.0);
        // Disagreement: |predicted gap| scaled by the normalized expected gap.
        let v = pairwise_rank_loss(1.0, 2.0, 2.0, 1.0, 1e-6);
        assert!((v - 1.0 / (1.0 + 1e-6)).abs() < 1e-12);
        // Tied expectations contribute nothing.
        assert_eq!(pairwise_rank_loss(5.0, -3.0, 1.0, 1.0, 1e-6), 0.0);
    }

    #[test]
    fn batch_rank_loss_counts_pairs_and_matches_brute_force() {
        // Perfectly ordered batch.
        assert_eq!(
            batch_rank_loss(
                &[1.0, 2.0, 3.0],
                &[10.0, 20.0, 30.0],
                1e-6,
                RankReduction::Mean
            )
            .unwrap(),
            0.0
        );
        assert!(batch_rank_loss(&[1.0], &[1.0], 1e-6, RankReduction::Mean).is_err());

        // N = 3 evaluates exactly 3 pairs: check sum reduction equals the
        // sum of the three explicit terms.
        let y = [1.0, 3.0, 2.0];
        let yh = [3.0, 1.0, 2.0];
        let explicit = pairwise_rank_loss(y[0], y[1], yh[0], yh[1], 1e-6)
            + pairwise_rank_loss(y[0], y[2], yh[0], yh[2], 1e-6)
            + pairwise_rank_loss(y[1], y[2], yh[1], yh[2], 1e-6);
        let summed = batch_rank_loss(&y, &yh, 1e-6, RankReduction::Sum).unwrap();
        assert!((summed - explicit).abs() < 1e-15);
        let mean = batch_rank_loss(&y, &yh, 1e-6, RankReduction::Mean).unwrap();
        assert!((mean - explicit / 3.0).abs() < 1e-15);
    }

    #[test]
    fn rank_loss_is_shift_invariant_in_predictions() {
        let mut rng = derive_rng(2, &[2]);
        for _ in 0..20 {
            let n = 2 + (rng.random::<u32>() % 8) as usize;
            let y: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
            let yh: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
            let c = rng.random::<f64>() * 10.0 - 5.0;
            let shifted: Vec<f64> = y.iter().map(|v| v + c).collect();
            let a = batch_rank_loss(&y, &yh, 1e-6, RankReduction::Mean).unwrap();
            let b = batch_rank_loss(&shifted, &yh, 1e-6, RankReduction::Mean).unwrap();
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn total_loss_components() {
        // Exact predictions: both terms vanish.
        let y = [0.1, 0.5, 0.9];
        assert_eq!(total_loss(&y, &y, 1e-6, RankReduction::Mean).unwrap(), 0.0);

        // Order-preserving offset: pure MAE.
        let offset: Vec<f64> = y.iter().map(|v| v + 0.25).collect();
        let t = total_loss(&offset, &y, 1e-6, RankReduction::Mean).unwrap();
        assert!((t - 0.25).abs() < 1e-12);

        // Random: equals the sum of the two components.
        let mut rng = derive_rng(3, &[3]);
        let a: Vec<f64> = (0..10).map(|_| rng.random::<f64>()).collect();
        let b: Vec<f64> = (0..10).map(|_| rng.random::<f64>()).collect();
        let total = total_loss(&a, &b, 1e-6, RankReduction::Mean).unwrap();
        let parts =
            mae_loss(&a, &b).unwrap() + batch_rank_loss(&a, &b, 1e-6, RankReduction::Mean).unwrap();
        assert!((total - parts).abs() < 1e-15);
    }

    #[test]
    fn tape_losses_match_plain_losses() {
        let mut rng = derive_rng(4, &[4]);
        for _ in 0..20 {
            let n = 2 + (rng.random::<u32>() % 10) as usize;
            let y: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let yh: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();

            let mut tape = Tape::<f64>::new();
            let preds = tape.leaf(Tensor::new(vec![n, 1], y.clone()).unwrap());
            let total = total_loss_on(&mut tape, preds, &yh, 1e-6, RankReduction::Mean).unwrap();
            let plain = total_loss(&y, &yh, 1e-6, RankReduction::Mean).unwrap();
            assert!((tape.value(total).data()[0] - plain).abs() < 1e-12);
        }
    }

    #[test]
    fn tape_rank_loss_gradient_matches_finite_differences() {
        let y0 = [0.3, -0.2, 0.8, 0.1];
        let yh = [0.1, 0.4, 0.9, 0.2];
        let eval = |y: &[f64]| {
            let mut tape = Tape::<f64>::new();
            let preds = tape.leaf(Tensor::new(vec![4, 1], y.to_vec()).unwrap());
            let loss = total_loss_on(&mut tape, preds, &yh, 1e-6, RankReduction::Mean).unwrap();
            tape.value(loss).data()[0]
        };

        let mut tape = Tape::<f64>::new();
        let preds = tape.leaf_grad(Tensor::new(vec![4, 1], y0.to_vec()).unwrap());
        let loss = total_loss_on(&mut tape, preds, &yh, 1e-6, RankReduction::Mean).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(preds).unwrap();

        let h = 1e-7;
        for i in 0..4 {
            let mut plus = y0;
            plus[i] += h;
            let mut minus = y0;
            minus[i] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            assert!((g[i] - fd).abs() < 1e-6, "pred {i}: {} vs {fd}", g[i]);
        }
    }
}
