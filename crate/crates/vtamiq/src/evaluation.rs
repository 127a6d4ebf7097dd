//! Correlation metrics with logistic pre-fitting, evaluation drivers, and
//! the representation-stability study.
//!
//! PLCC is computed after fitting a 4-parameter monotone logistic from
//! predictions to targets (standard IQA practice); SROCC and KROCC are
//! rank-based and computed on the raw predictions.

use serde::{Deserialize, Serialize};

use crate::datasets::{average_ranks, DatasetManifest, ImageRecord, SplitSpec, Subset};
use crate::error::{Error, Result};
use crate::model::VtamiqModel;
use crate::sampler::{build_probability_map, sample_patches, PatchSequence, SamplerConfig};
use crate::tensor::{stable_hash, Scalar, Tensor};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

// ── Correlation coefficients ────────────────────────────────────────

fn check_pair(x: &[f64], y: &[f64], metric: &'static str) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch {
            op: metric,
            lhs: vec![x.len()],
            rhs: vec![y.len()],
        });
    }
    if x.len() < 2 {
        return Err(Error::UndefinedCorrelation {
            metric,
            reason: format!("need at least 2 samples, got {}", x.len()),
        });
    }
    Ok(())
}

fn pearson(x: &[f64], y: &[f64], metric: &'static str) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (&a, &b) in x.iter().zip(y.iter()) {
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
        sxy += (a - mx) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation {
            metric,
            reason: "constant input has no correlation".into(),
        });
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Pearson linear correlation coefficient.
pub fn plcc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y, "plcc")?;
    pearson(x, y, "plcc")
}

/// Spearman rank-order correlation: Pearson over average-tie ranks.
pub fn srocc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y, "srocc")?;
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    pearson(&rx, &ry, "srocc")
}

/// Kendall rank-order correlation, tie-adjusted (tau-b).
pub fn krocc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y, "krocc")?;
    let n = x.len();
    let mut concordant = 0i64;
    let mut discordant = 0i64;
    let mut ties_x = 0i64;
    let mut ties_y = 0i64;
    for i in 0..n {
        for j in i + 1..n {
            let dx = x[i] - x[j];
            let dy = y[i] - y[j];
            if dx == 0.0 && dy == 0.0 {
                // Joint tie: counted in neither adjustment.
            } else if dx == 0.0 {
                ties_x += 1;
            } else if dy == 0.0 {
                ties_y += 1;
            } else if dx * dy > 0.0 {
                concordant += 1;
            } else {
                discordant += 1;
            }
        }
    }
    let n0 = (n * (n - 1) / 2) as f64;
    let joint = n0 - (concordant + discordant + ties_x + ties_y) as f64;
    let nx = n0 - (ties_x as f64 + joint);
    let ny = n0 - (ties_y as f64 + joint);
    if nx == 0.0 || ny == 0.0 {
        return Err(Error::UndefinedCorrelation {
            metric: "krocc",
            reason: "constant input has no correlation".into(),
        });
    }
    Ok((concordant - discordant) as f64 / (nx * ny).sqrt())
}

// ── Logistic fitting ────────────────────────────────────────────────

/// Parameters of the monotone logistic
/// `f(s) = b1 * (1/2 - 1/(1 + exp(b2 (s - b3)))) + b4`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticParams {
    pub beta: [f64; 4],
}

impl LogisticParams {
    pub fn eval(&self, s: f64) -> f64 {
        let [b1, b2, b3, b4] = self.beta;
        let z = b2 * (s - b3);
        // Stable split keeps exp from overflowing on either tail.
        let sig = if z >= 0.0 {
            1.0 / (1.0 + (-z).exp())
        } else {
            let e = z.exp();
            e / (1.0 + e)
        };
        b1 * (sig - 0.5) + b4
    }
}

fn solve4(mut a: [[f64; 4]; 4], mut b: [f64; 4]) -> Option<[f64; 4]> {
    for col in 0..4 {
        let pivot = (col..4).max_by(|&i, &j| {
            a[i][col]
                .abs()
                .partial_cmp(&a[j][col].abs())
                .expect("finite")
        })?;
        if a[pivot][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..4 {
            let factor = a[row][col] / a[col][col];
            for k in col..4 {
                a[row][k] -= factor * a[col][k];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = [0.0; 4];
    for row in (0..4).rev() {
        let mut acc = b[row];
        for k in row + 1..4 {
            acc -= a[row][k] * x[k];
        }
        x[row] = acc / a[row][row];
    }
    Some(x)
}

fn sse(params: &LogisticParams, predictions: &[f64], targets: &[f64]) -> f64 {
    predictions
        .iter()
        .zip(targets.iter())
        .map(|(&s, &t)| {
            let r = params.eval(s) - t;
            r * r
        })
        .sum()
}

/// Levenberg-damped least squares from one starting point. Returns the
/// final parameters, their SSE, and whether the descent stalled (converged)
/// before the iteration cap; `last_gain` reports the final step's SSE
/// improvement for soft convergence checks.
struct FitCandidate {
    params: LogisticParams,
    sse: f64,
    converged: bool,
    last_gain: f64,
}

fn levenberg_fit(
    mut params: LogisticParams,
    predictions: &[f64],
    targets: &[f64],
    max_iter: usize,
) -> FitCandidate {
    let n = predictions.len();
    let mut lambda = 1e-3;
    let mut current_sse = sse(&params, predictions, targets);
    let mut converged = false;
    let mut last_gain = f64::INFINITY;

    for _ in 0..max_iter {
        // J^T J and J^T r assembled on the fly.
        let [b1, b2, b3, _b4] = params.beta;
        let mut jtj = [[0.0; 4]; 4];
        let mut jtr = [0.0; 4];
        for i in 0..n {
            let s = predictions[i];
            let z = b2 * (s - b3);
            let sig = if z >= 0.0 {
                1.0 / (1.0 + (-z).exp())
            } else {
                let e = z.exp();
                e / (1.0 + e)
            };
            let r = b1 * (sig - 0.5) + params.beta[3] - targets[i];
            let w = sig * (1.0 - sig);
            let j = [sig - 0.5, b1 * w * (s - b3), -b1 * w * b2, 1.0];
            for a in 0..4 {
                jtr[a] += j[a] * r;
                for b in 0..4 {
                    jtj[a][b] += j[a] * j[b];
                }
            }
        }

        let mut improved = false;
        for _ in 0..8 {
            let mut damped = jtj;
            for d in 0..4 {
                damped[d][d] += lambda * (jtj[d][d].max(1e-12));
            }
            let Some(delta) = solve4(damped, [-jtr[0], -jtr[1], -jtr[2], -jtr[3]]) else {
                lambda *= 10.0;
                continue;
            };
            let candidate = LogisticParams {
                beta: [
                    params.beta[0] + delta[0],
                    params.beta[1] + delta[1],
                    params.beta[2] + delta[2],
                    params.beta[3] + delta[3],
                ],
            };
            let candidate_sse = sse(&candidate, predictions, targets);
            if candidate_sse.is_finite() && candidate_sse < current_sse {
                let gain = current_sse - candidate_sse;
                params = candidate;
                current_sse = candidate_sse;
                lambda = (lambda * 0.3).max(1e-12);
                improved = true;
                last_gain = gain;
                if gain <= 1e-10 * (1.0 + current_sse) {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            converged = true;
            last_gain = 0.0;
            break;
        }
        if converged {
            break;
        }
    }
    FitCandidate {
        params,
        sse: current_sse,
        converged,
        last_gain,
    }
}

/// Least-squares fit of the 4-parameter logistic, returning the parameters
/// and the mapped predictions (used for PLCC).
///
/// Initialization is data-driven (`b1` from the target range, `b3` at the
/// prediction median) and several slope scales are tried, including a
/// near-linear regime, so the fit never loses to a plain affine map on the
/// fitting data.
pub fn logistic_fit(predictions: &[f64], targets: &[f64]) -> Result<(LogisticParams, Vec<f64>)> {
    if predictions.len() != targets.len() {
        return Err(Error::ShapeMismatch {
            op: "logistic_fit",
            lhs: vec![predictions.len()],
            rhs: vec![targets.len()],
        });
    }
    if predictions.len() < 5 {
        return Err(Error::Contract {
            op: "logistic_fit",
            reason: format!("need at least 5 points, got {}", predictions.len()),
        });
    }
    let p_lo = predictions.iter().copied().fold(f64::INFINITY, f64::min);
    let p_hi = predictions
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    if p_hi - p_lo == 0.0 {
        return Err(Error::Contract {
            op: "logistic_fit",
            reason: "predictions are constant".into(),
        });
    }
    let t_lo = targets.iter().copied().fold(f64::INFINITY, f64::min);
    let t_hi = targets.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let t_mean = targets.iter().sum::<f64>() / targets.len() as f64;

    let mut sorted = predictions.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite predictions"));
    let median = sorted[sorted.len() / 2];

    // Direction of the relation decides the slope sign.
    let direction = pearson(predictions, targets, "plcc")
        .unwrap_or(1.0)
        .signum();
    let range_t = (t_hi - t_lo).max(1e-12);
    let base_slope = direction * 4.0 / (p_hi - p_lo);

    let max_iter = 300;
    let mut starts = vec![];
    for scale in [1.0, 0.25, 4.0] {
        starts.push(LogisticParams {
            beta: [range_t, base_slope * scale, median, t_mean],
        });
    }
    // Linear-limit member of the family: at vanishing slope the logistic is
    // affine to O(b2^2), so seeding with the exact least-squares line keeps
    // the fit from ever losing to a plain affine map on the fitting data.
    {
        let n = predictions.len() as f64;
        let p_mean = predictions.iter().sum::<f64>() / n;
        let mut num = 0.0;
        let mut den = 0.0;
        for (&p, &t) in predictions.iter().zip(targets.iter()) {
            num += (p - p_mean) * (t - t_mean);
            den += (p - p_mean) * (p - p_mean);
        }
        let slope = num / den;
        let intercept = t_mean - slope * p_mean;
        let b2 = 1e-5 * 4.0 / (p_hi - p_lo);
        starts.push(LogisticParams {
            beta: [4.0 * slope / b2, b2, median, slope * median + intercept],
        });
    }

    // A candidate is usable when its descent stalled, or when it ran out of
    // iterations with a negligible final step (the flat valley of the
    // parameterization). Failure means every start was still descending.
    let mut best_usable: Option<FitCandidate> = None;
    let mut best_residual = f64::INFINITY;
    for start in starts {
        let candidate = levenberg_fit(start, predictions, targets, max_iter);
        if !candidate.params.beta.iter().all(|v| v.is_finite()) {
            continue;
        }
        best_residual = best_residual.min(candidate.sse);
        let usable = candidate.converged || candidate.last_gain <= 1e-6 * (1.0 + candidate.sse);
        if usable && best_usable.as_ref().is_none_or(|b| candidate.sse < b.sse) {
            best_usable = Some(candidate);
        }
    }
    let Some(chosen) = best_usable else {
        return Err(Error::FitFailure {
            iterations: max_iter,
            residual: best_residual,
        });
    };
    let params = chosen.params;
    let mapped = predictions.iter().map(|&s| params.eval(s)).collect();
    Ok((params, mapped))
}

/// Cosine similarity of two equally sized vectors.
pub fn cosine_similarity<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "cosine_similarity",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.data().iter().zip(b.data().iter()) {
        let (x, y) = (x.as_f64(), y.as_f64());
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::UndefinedCorrelation {
            metric: "cosine",
            reason: "zero-magnitude representation".into(),
        });
    }
    Ok(dot / (na * nb).sqrt())
}

// ── Evaluation drivers ──────────────────────────────────────────────

/// Settings for an evaluation pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Patches sampled per image per run.
    pub n_patches: usize,
    /// Independent evaluation runs with fresh sampling; the report is the
    /// mean over runs.
    pub runs: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_patches: 1024,
            runs: 20,
            seed: 0,
        }
    }
}

/// Per-run correlation values and fitted logistic parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub plcc: f64,
    pub srocc: f64,
    pub krocc: f64,
    pub logistic: LogisticParams,
}

/// Aggregated evaluation outcome: headline numbers are means over runs;
/// per-run values are retained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub plcc: f64,
    pub srocc: f64,
    pub krocc: f64,
    pub n_images: usize,
    pub runs: Vec<RunResult>,
}

impl CorrelationReport {
    fn from_runs(runs: Vec<RunResult>, n_images: usize) -> Self {
        let n = runs.len() as f64;
        Self {
            plcc: runs.iter().map(|r| r.plcc).sum::<f64>() / n,
            srocc: runs.iter().map(|r| r.srocc).sum::<f64>() / n,
            krocc: runs.iter().map(|r| r.krocc).sum::<f64>() / n,
            n_images,
            runs,
        }
    }

    /// Logistic parameters of the final run (fits are per-run).
    pub fn logistic_params(&self) -> LogisticParams {
        self.runs.last().expect("at least one run").logistic
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("run,plcc,srocc,krocc,beta1,beta2,beta3,beta4,n_images\n");
        for (i, r) in self.runs.iter().enumerate() {
            out.push_str(&format!(
                "{},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{}\n",
                i + 1,
                r.plcc,
                r.srocc,
                r.krocc,
                r.logistic.beta[0],
                r.logistic.beta[1],
                r.logistic.beta[2],
                r.logistic.beta[3],
                self.n_images
            ));
        }
        out.push_str(&format!(
            "mean,{:.9},{:.9},{:.9},,,,,{}\n",
            self.plcc, self.srocc, self.krocc, self.n_images
        ));
        out
    }

    pub fn to_table(&self) -> String {
        format!(
            "images: {}  runs: {}\n  PLCC  {:+.4}\n  SROCC {:+.4}\n  KROCC {:+.4}\n",
            self.n_images,
            self.runs.len(),
            self.plcc,
            self.srocc,
            self.krocc
        )
    }
}

/// Evaluation core over an arbitrary predictor. `predict(run, record,
/// seed)` must be deterministic in its arguments; records are keyed by a
/// stable hash so the report does not depend on record ordering.
pub fn evaluate_with<P>(
    records: &[(&ImageRecord, f64)],
    cfg: &EvalConfig,
    predict: P,
) -> Result<CorrelationReport>
where
    P: Fn(usize, &ImageRecord, u64) -> Result<f64> + Sync,
{
    if records.len() < 2 {
        return Err(Error::Config(format!(
            "evaluation needs at least 2 records, got {}",
            records.len()
        )));
    }
    if cfg.runs == 0 || cfg.n_patches == 0 {
        return Err(Error::Config("runs and n_patches must be positive".into()));
    }

    // Stable order regardless of caller ordering.
    let mut ordered: Vec<(&ImageRecord, f64, u64)> = records
        .iter()
        .map(|&(r, t)| {
            let key = stable_hash(r.distorted_path.to_string_lossy().as_bytes())
                ^ stable_hash(r.reference_id.as_bytes()).rotate_left(13);
            (r, t, key)
        })
        .collect();
    ordered.sort_by_key(|&(_, _, key)| key);
    let targets: Vec<f64> = ordered.iter().map(|&(_, t, _)| t).collect();

    let mut runs = Vec::with_capacity(cfg.runs);
    for run in 0..cfg.runs {
        let predictions = collect_predictions(&ordered, run, cfg.seed, &predict)?;
        let (logistic, mapped) = logistic_fit(&predictions, &targets)?;
        runs.push(RunResult {
            plcc: plcc(&mapped, &targets)?,
            srocc: srocc(&predictions, &targets)?,
            krocc: krocc(&predictions, &targets)?,
            logistic,
        });
    }
    Ok(CorrelationReport::from_runs(runs, ordered.len()))
}

fn collect_predictions<P>(
    ordered: &[(&ImageRecord, f64, u64)],
    run: usize,
    seed: u64,
    predict: &P,
) -> Result<Vec<f64>>
where
    P: Fn(usize, &ImageRecord, u64) -> Result<f64> + Sync,
{
    let job = |&(record, _, key): &(&ImageRecord, f64, u64)| -> Result<f64> {
        predict(run, record, seed ^ key)
    };
    #[cfg(feature = "parallel")]
    {
        ordered.par_iter().map(job).collect()
    }
    #[cfg(not(feature = "parallel"))]
    ordered.iter().map(job).collect()
}

/// Predicts one record by CAPS-sampling `n_patches` aligned patches.
pub fn predict_record<F: Scalar>(
    model: &VtamiqModel<F>,
    reference: &Tensor<F>,
    distorted: &Tensor<F>,
    sampler: &SamplerConfig,
    n_patches: usize,
    seed: u64,
) -> Result<f64> {
    let pmap = build_probability_map(reference, distorted, sampler)?;
    let (seq_ref, seq_dist) = sample_patches(
        reference,
        distorted,
        &pmap,
        n_patches,
        sampler.patch_size,
        seed,
    )?;
    Ok(model.predict_pair(&seq_ref, &seq_dist)?.value)
}

/// Full evaluation of a model over a manifest subset (or the entire
/// manifest when `split` is `None`, the cross-database protocol).
pub fn evaluate<F: Scalar>(
    model: &VtamiqModel<F>,
    manifest: &DatasetManifest,
    split: Option<(&SplitSpec, Subset)>,
    sampler: &SamplerConfig,
    norm: &crate::datasets::NormalizationSpec,
    cfg: &EvalConfig,
) -> Result<CorrelationReport> {
    let targets = manifest.normalized_scores();
    let selected: Vec<(&ImageRecord, f64)> = manifest
        .records
        .iter()
        .zip(targets.iter())
        .filter(|(r, _)| match split {
            Some((spec, subset)) => spec.subset_of(&r.reference_id) == Some(subset),
            None => true,
        })
        .map(|(r, &t)| (r, t))
        .collect();
    if selected.is_empty() {
        return Err(Error::Config("selected evaluation subset is empty".into()));
    }

    // Images decoded once up front; runs then only sample and encode.
    let mut cache: std::collections::HashMap<&std::path::Path, Tensor<F>> =
        std::collections::HashMap::new();
    for (r, _) in &selected {
        for path in [r.reference_path.as_path(), r.distorted_path.as_path()] {
            if !cache.contains_key(path) {
                cache.insert(path, crate::datasets::load_image_normalized(path, norm)?);
            }
        }
    }

    evaluate_with(&selected, cfg, |run, record, seed| {
        let reference = &cache[record.reference_path.as_path()];
        let distorted = &cache[record.distorted_path.as_path()];
        predict_record(
            model,
            reference,
            distorted,
            sampler,
            cfg.n_patches,
            seed ^ ((run as u64 + 1) << 32),
        )
    })
}

/// Cross-database evaluation: the full record list of an unseen dataset.
/// `trained_on` (the training dataset's split) is used only to assert that
/// no evaluated record was part of training.
pub fn cross_database_evaluate<F: Scalar>(
    model: &VtamiqModel<F>,
    dataset: &DatasetManifest,
    trained_on: Option<(&str, &SplitSpec)>,
    sampler: &SamplerConfig,
    norm: &crate::datasets::NormalizationSpec,
    cfg: &EvalConfig,
) -> Result<CorrelationReport> {
    if let Some((train_name, split)) = trained_on {
        if train_name == dataset.name {
            for r in &dataset.records {
                if split.subset_of(&r.reference_id) == Some(Subset::Train) {
                    return Err(Error::Contract {
                        op: "cross_database_evaluate",
                        reason: format!(
                            "record {:?} of {:?} was seen during training",
                            r.distorted_path, dataset.name
                        ),
                    });
                }
            }
        }
    }
    evaluate(model, dataset, None, sampler, norm, cfg)
}

/// Mean pairwise cosine similarity of the encoded representation over
/// `trials` independently sampled patch sets of the same image.
pub fn representation_stability<F: Scalar, S>(
    model: &VtamiqModel<F>,
    trials: usize,
    sample: S,
) -> Result<f64>
where
    S: Fn(usize) -> Result<PatchSequence<F>>,
{
    if trials < 2 {
        return Err(Error::Contract {
            op: "representation_stability",
            reason: "need at least 2 trials".into(),
        });
    }
    let reps: Vec<Tensor<F>> = (0..trials)
        .map(|t| Ok(model.encode(&sample(t)?)?.vector))
        .collect::<Result<_>>()?;
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..trials {
        for j in i + 1..trials {
            total += cosine_similarity(&reps[i], &reps[j])?;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Stability with weighted patch sampling from a fixed probability map.
pub fn representation_stability_sampled<F: Scalar>(
    model: &VtamiqModel<F>,
    image: &Tensor<F>,
    pmap: &crate::sampler::ProbabilityMap,
    n_patches: usize,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    let p = pmap.patch_size();
    representation_stability(model, trials, |trial| {
        let (seq, _) = sample_patches(
            image,
            image,
            pmap,
            n_patches,
            p,
            seed ^ ((trial as u64) << 20),
        )?;
        Ok(seq)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::derive_rng;
    use rand::Rng;

    #[test]
    fn srocc_monotone_and_reversed() {
        assert_eq!(srocc(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(), 1.0);
        assert_eq!(srocc(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
    }

    #[test]
    fn srocc_tied_ranks_match_rank_then_pearson_oracle() {
        let x = [1.0, 2.0, 2.0, 3.0];
        let ranks = average_ranks(&x);
        assert_eq!(ranks, vec![1.0, 2.5, 2.5, 4.0]);

        let y = [4.0, 1.0, 3.0, 2.0];
        let direct = srocc(&x, &y).unwrap();
        let oracle = pearson(&average_ranks(&x), &average_ranks(&y), "plcc").unwrap();
        assert!((direct - oracle).abs() < 1e-12);
    }

    #[test]
    fn krocc_hand_count_and_identity() {
        let v = krocc(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(krocc(&[1.0, 5.0, 2.0], &[1.0, 5.0, 2.0]).unwrap(), 1.0);
    }

    #[test]
    fn krocc_with_ties_matches_pair_count_oracle() {
        let mut rng = derive_rng(5, &[5]);
        for _ in 0..50 {
            let n = 3 + (rng.random::<u32>() % 30) as usize;
            // Quantized values force ties.
            let x: Vec<f64> = (0..n)
                .map(|_| (rng.random::<f64>() * 6.0).round())
                .collect();
            let y: Vec<f64> = (0..n)
                .map(|_| (rng.random::<f64>() * 6.0).round())
                .collect();
            let got = match krocc(&x, &y) {
                Ok(v) => v,
                Err(_) => continue,
            };

            // Direct tau-b oracle.
            let (mut c, mut d, mut tx, mut ty) = (0f64, 0f64, 0f64, 0f64);
            for i in 0..n {
                for j in i + 1..n {
                    let dx = x[i] - x[j];
                    let dy = y[i] - y[j];
                    if dx == 0.0 && dy == 0.0 {
                    } else if dx == 0.0 {
                        tx += 1.0;
                    } else if dy == 0.0 {
                        ty += 1.0;
                    } else if dx * dy > 0.0 {
                        c += 1.0;
                    } else {
                        d += 1.0;
                    }
                }
            }
            let expect = (c - d) / (((c + d + tx) * (c + d + ty)).sqrt());
            assert!((got - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn plcc_affine_and_oracle() {
        let x = [1.0, 2.0, 5.0, 7.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        assert!((plcc(&x, &y).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((plcc(&x, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert!(matches!(
            plcc(&[1.0, 1.0], &[1.0, 2.0]).unwrap_err(),
            Error::UndefinedCorrelation { .. }
        ));
    }

    #[test]
    fn rank_metrics_invariant_under_monotone_transforms() {
        let mut rng = derive_rng(6, &[6]);
        let x: Vec<f64> = (0..40).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        let y: Vec<f64> = (0..40).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        let s0 = srocc(&x, &y).unwrap();
        let k0 = krocc(&x, &y).unwrap();
        let transforms: [fn(f64) -> f64; 3] = [|v| v.exp(), |v| 3.0 * v + 11.0, |v| v * v * v];
        for t in transforms {
            let tx: Vec<f64> = x.iter().map(|&v| t(v)).collect();
            assert_eq!(srocc(&tx, &y).unwrap(), s0);
            assert_eq!(krocc(&tx, &y).unwrap(), k0);
        }
    }

    #[test]
    fn logistic_fit_recovers_generator() {
        let truth = LogisticParams {
            beta: [2.0, 1.6, 0.3, 0.8],
        };
        let predictions: Vec<f64> = (0..60).map(|i| -2.0 + i as f64 * 0.07).collect();
        let targets: Vec<f64> = predictions.iter().map(|&s| truth.eval(s)).collect();
        let (params, mapped) = logistic_fit(&predictions, &targets).unwrap();
        let residual: f64 = mapped
            .iter()
            .zip(targets.iter())
            .map(|(m, t)| (m - t) * (m - t))
            .sum();
        assert!(residual < 1e-6, "residual {residual}");
        for (got, want) in params.beta.iter().zip(truth.beta.iter()) {
            assert!((got - want).abs() < 1e-3, "{got} vs {want}");
        }
    }

    #[test]
    fn logistic_fit_never_hurts_on_linear_data() {
        let predictions: Vec<f64> = (0..30).map(|i| i as f64 * 0.2).collect();
        let targets: Vec<f64> = predictions.iter().map(|&s| 3.0 * s - 1.0).collect();
        let raw = plcc(&predictions, &targets).unwrap();
        let (_, mapped) = logistic_fit(&predictions, &targets).unwrap();
        let fitted = plcc(&mapped, &targets).unwrap();
        assert!(fitted >= raw - 1e-9, "fitted {fitted} vs raw {raw}");
    }

    #[test]
    fn logistic_fit_preserves_ranks_when_monotone() {
        let mut rng = derive_rng(7, &[7]);
        let predictions: Vec<f64> = (0..25).map(|_| rng.random::<f64>() * 3.0).collect();
        let targets: Vec<f64> = predictions
            .iter()
            .map(|&s| 2.0 / (1.0 + (-1.2 * (s - 1.5)).exp()) + 0.05 * rng.random::<f64>())
            .collect();
        let (params, mapped) = logistic_fit(&predictions, &targets).unwrap();
        assert!(params.beta[1] > 0.0);
        assert_eq!(
            srocc(&mapped, &targets).unwrap(),
            srocc(&predictions, &targets).unwrap()
        );
    }

    #[test]
    fn logistic_fit_rejects_degenerate_input() {
        assert!(logistic_fit(&[1.0, 1.0, 1.0, 1.0, 1.0], &[1.0, 2.0, 3.0, 4.0, 5.0]).is_err());
        assert!(logistic_fit(&[1.0, 2.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn cosine_similarity_bounds_and_errors() {
        let a = Tensor::<f64>::new(vec![3], vec![1.0, 0.0, 0.0]).unwrap();
        let b = Tensor::<f64>::new(vec![3], vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(cosine_similarity(&a, &a).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&a, &b).unwrap(), 0.0);
        let z = Tensor::<f64>::zeros(&[3]);
        assert!(cosine_similarity(&a, &z).is_err());
    }

    fn fake_records(n: usize) -> Vec<(ImageRecord, f64)> {
        (0..n)
            .map(|i| {
                (
                    ImageRecord {
                        reference_path: format!("r{}.png", i / 3).into(),
                        distorted_path: format!("d{i}.png").into(),
                        score: i as f64,
                        reference_id: format!("ref{}", i / 3),
                    },
                    (i as f64) / n as f64,
                )
            })
            .collect()
    }

    #[test]
    fn perfect_predictor_scores_one_everywhere() {
        let owned = fake_records(12);
        let records: Vec<(&ImageRecord, f64)> = owned.iter().map(|(r, t)| (r, *t)).collect();
        let cfg = EvalConfig {
            n_patches: 8,
            runs: 3,
            seed: 5,
        };
        let targets: std::collections::HashMap<String, f64> = owned
            .iter()
            .map(|(r, t)| (r.distorted_path.to_string_lossy().into_owned(), *t))
            .collect();
        let report = evaluate_with(&records, &cfg, |_, rec, _| {
            Ok(targets[&rec.distorted_path.to_string_lossy().into_owned()])
        })
        .unwrap();
        assert!((report.plcc - 1.0).abs() < 1e-9);
        assert!((report.srocc - 1.0).abs() < 1e-12);
        assert!((report.krocc - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_predictor_surfaces_correlation_error() {
        let owned = fake_records(8);
        let records: Vec<(&ImageRecord, f64)> = owned.iter().map(|(r, t)| (r, *t)).collect();
        let cfg = EvalConfig {
            n_patches: 8,
            runs: 1,
            seed: 5,
        };
        let err = evaluate_with(&records, &cfg, |_, _, _| Ok(0.5)).unwrap_err();
        assert!(matches!(
            err,
            Error::Contract { .. } | Error::UndefinedCorrelation { .. }
        ));
    }

    #[test]
    fn evaluation_is_order_independent_and_seed_deterministic() {
        let owned = fake_records(10);
        let records: Vec<(&ImageRecord, f64)> = owned.iter().map(|(r, t)| (r, *t)).collect();
        let mut reversed = records.clone();
        reversed.reverse();
        let cfg = EvalConfig {
            n_patches: 4,
            runs: 2,
            seed: 9,
        };
        // Predictor depends on the record identity and the derived seed only.
        let predict = |run: usize, rec: &ImageRecord, seed: u64| {
            let h = stable_hash(rec.distorted_path.to_string_lossy().as_bytes());
            Ok(((h ^ seed).wrapping_add(run as u64) % 1000) as f64 / 10.0)
        };
        let a = evaluate_with(&records, &cfg, predict).unwrap();
        let b = evaluate_with(&reversed, &cfg, predict).unwrap();
        let c = evaluate_with(&records, &cfg, predict).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
    }
}
