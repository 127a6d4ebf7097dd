//! Training loop: shuffled batches with fresh patch sampling per image
//! visit, AdamW updates, step learning-rate decay, and per-epoch
//! validation SROCC for model selection.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datasets::{
    load_image_normalized, DatasetManifest, ImageRecord, NormalizationSpec, SplitSpec, Subset,
};
use crate::error::{Error, Result};
use crate::evaluation;
use crate::losses::{self, RankReduction};
use crate::model::VtamiqModel;
use crate::sampler::{build_probability_map, sample_patches, PatchSequence, SamplerConfig};
use crate::tensor::gradcheck::{finite_diff_gradient, relative_error};
use crate::tensor::params::ParameterStore;
use crate::tensor::tape::{Graph, Var};
use crate::tensor::{derive_rng, stable_hash, Scalar, Tensor};

/// Optimization schedule and batch geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Patches sampled per image during training.
    pub patches_train: usize,
    /// Patches per image for validation scoring.
    pub patches_eval: usize,
    pub epochs: usize,
    pub lr_initial: f64,
    /// 1-based epoch at which the learning rate is divided by
    /// `lr_decay_factor`.
    pub lr_decay_epoch: usize,
    pub lr_decay_factor: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub rank_eps: f64,
    pub rank_reduction: RankReduction,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 20,
            patches_train: 256,
            patches_eval: 1024,
            epochs: 20,
            lr_initial: 1e-5,
            lr_decay_epoch: 12,
            lr_decay_factor: 10.0,
            weight_decay: 0.01,
            seed: 0,
            rank_eps: 1e-6,
            rank_reduction: RankReduction::Mean,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0
            || self.patches_train == 0
            || self.patches_eval == 0
            || self.epochs == 0
        {
            return Err(Error::Config(
                "batch size, patch counts, and epochs must be positive".into(),
            ));
        }
        if self.lr_initial < 0.0 || self.lr_decay_factor <= 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config("invalid optimizer settings".into()));
        }
        if self.rank_eps <= 0.0 {
            return Err(Error::Config("rank_eps must be positive".into()));
        }
        if self.lr_decay_epoch > self.epochs {
            return Err(Error::Config(format!(
                "lr_decay_epoch {} exceeds epochs {}",
                self.lr_decay_epoch, self.epochs
            )));
        }
        Ok(())
    }

    /// Learning rate for a 1-based epoch index.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        if epoch >= self.lr_decay_epoch {
            self.lr_initial / self.lr_decay_factor
        } else {
            self.lr_initial
        }
    }
}

/// AdamW with decoupled weight decay and bias correction. The customary
/// defaults are beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
pub struct AdamW<F: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(store: &ParameterStore<F>, lr: f64, weight_decay: f64) -> Self {
        let m = store.iter().map(|p| vec![F::zero(); p.numel()]).collect();
        let v = store.iter().map(|p| vec![F::zero(); p.numel()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m,
            v,
        }
    }

    /// One update from the gradients currently accumulated in the store.
    pub fn step(&mut self, store: &mut ParameterStore<F>) {
        self.step += 1;
        let b1 = F::from_f64(self.beta1);
        let b2 = F::from_f64(self.beta2);
        let one = F::one();
        let corr1 = F::from_f64(1.0 - self.beta1.powi(self.step as i32));
        let corr2 = F::from_f64(1.0 - self.beta2.powi(self.step as i32));
        let lr = F::from_f64(self.lr);
        let wd = F::from_f64(self.weight_decay);
        let eps = F::from_f64(self.eps);

        for idx in 0..store.len() {
            let grad = store.by_index(idx).grad().data().to_vec();
            let mut value = store.by_index(idx).value().data().to_vec();
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for i in 0..value.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                let m_hat = m[i] / corr1;
                let v_hat = v[i] / corr2;
                value[i] = value[i] - lr * (m_hat / (v_hat.sqrt() + eps) + wd * value[i]);
            }
            let shape = store.by_index(idx).value().shape().to_vec();
            *store.value_mut(idx) = Tensor::new(shape, value).expect("shape preserved");
        }
    }
}

/// One history row per epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    /// NaN when validation is empty or the correlation is undefined.
    pub val_srocc: f64,
    pub lr: f64,
}

/// Result of a training run: the best-validation model plus the history.
pub struct TrainOutcome<F: Scalar> {
    pub model: VtamiqModel<F>,
    pub history: Vec<EpochStats>,
    /// 1-based epoch of the returned checkpoint, when validation selected
    /// one.
    pub best_epoch: Option<usize>,
}

/// History serialization used by the CLI (`epoch,train_loss,val_srocc,lr`).
pub fn history_to_csv(history: &[EpochStats]) -> String {
    let mut out = String::from("epoch,train_loss,val_srocc,lr\n");
    for row in history {
        out.push_str(&format!(
            "{},{:.9},{:.9},{:e}\n",
            row.epoch, row.train_loss, row.val_srocc, row.lr
        ));
    }
    out
}

struct ImageCache<F: Scalar> {
    images: HashMap<PathBuf, Tensor<F>>,
    norm: NormalizationSpec,
    capacity: usize,
}

impl<F: Scalar> ImageCache<F> {
    fn new(norm: NormalizationSpec) -> Self {
        Self {
            images: HashMap::new(),
            norm,
            capacity: 512,
        }
    }

    fn get(&mut self, path: &Path) -> Result<Tensor<F>> {
        if let Some(t) = self.images.get(path) {
            return Ok(t.clone());
        }
        let t = load_image_normalized(path, &self.norm)?;
        if self.images.len() >= self.capacity {
            self.images.clear();
        }
        self.images.insert(path.to_path_buf(), t.clone());
        Ok(t)
    }
}

type SampledPair<F> = (PatchSequence<F>, PatchSequence<F>, f64);

/// Assembles one batch: fresh CAPS sampling per record with per-(epoch,
/// image) seeds derived from the master seed.
fn assemble_batch<F: Scalar>(
    records: &[(&ImageRecord, f64)],
    cache: &mut ImageCache<F>,
    sampler: &SamplerConfig,
    n_patches: usize,
    master_seed: u64,
    epoch: usize,
) -> Result<Vec<SampledPair<F>>> {
    // Decode (and cache) sequentially, then sample in parallel.
    let mut images = Vec::with_capacity(records.len());
    for (record, target) in records {
        let reference = cache.get(&record.reference_path)?;
        let distorted = cache.get(&record.distorted_path)?;
        let key = stable_hash(record.distorted_path.to_string_lossy().as_bytes());
        images.push((reference, distorted, *target, key));
    }

    let job = |(reference, distorted, target, key): &(Tensor<F>, Tensor<F>, f64, u64)| {
        let pmap = build_probability_map(reference, distorted, sampler)?;
        let seed = master_seed
            .wrapping_add(*key)
            .wrapping_add((epoch as u64) << 48);
        let (seq_ref, seq_dist) = sample_patches(
            reference,
            distorted,
            &pmap,
            n_patches,
            sampler.patch_size,
            seed,
        )?;
        Ok((seq_ref, seq_dist, *target))
    };

    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        images.par_iter().map(job).collect()
    }
    #[cfg(not(feature = "parallel"))]
    images.iter().map(job).collect()
}

/// Builds the batch loss graph and returns its value node.
fn batch_loss_graph<'s, F: Scalar>(
    model: &'s VtamiqModel<F>,
    g: &mut Graph<'s, F>,
    batch: &[SampledPair<F>],
    rank_eps: f64,
    reduction: RankReduction,
) -> Result<Var> {
    let mut scores = Vec::with_capacity(batch.len());
    for (seq_ref, seq_dist, _) in batch {
        let s = model.predict_pair_on_graph(g, seq_ref, seq_dist)?;
        scores.push(g.tape.reshape(s, vec![1, 1])?);
    }
    let predictions = g.tape.concat_rows(&scores)?;
    let targets: Vec<F> = batch.iter().map(|(_, _, t)| F::from_f64(*t)).collect();
    if batch.len() >= 2 {
        losses::total_loss_on(&mut g.tape, predictions, &targets, rank_eps, reduction)
    } else {
        losses::mae_loss_on(&mut g.tape, predictions, &targets)
    }
}

/// Trains the model per the standard protocol and returns the checkpoint
/// with the best validation SROCC (the final model when validation is
/// empty).
pub fn train<F: Scalar>(
    model: VtamiqModel<F>,
    manifest: &DatasetManifest,
    split: &SplitSpec,
    sampler: &SamplerConfig,
    norm: &NormalizationSpec,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<F>> {
    train_with(model, manifest, split, sampler, norm, cfg, |_, _| Ok(()))
}

/// [`train`] with a per-epoch callback (periodic checkpointing, progress
/// logging). The callback sees the current model and the epoch row just
/// appended to the history.
pub fn train_with<F: Scalar>(
    model: VtamiqModel<F>,
    manifest: &DatasetManifest,
    split: &SplitSpec,
    sampler: &SamplerConfig,
    norm: &NormalizationSpec,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&VtamiqModel<F>, &EpochStats) -> Result<()>,
) -> Result<TrainOutcome<F>> {
    cfg.validate()?;
    sampler.validate()?;

    let targets = manifest.normalized_scores();
    let train_records: Vec<(&ImageRecord, f64)> = manifest
        .records
        .iter()
        .zip(targets.iter())
        .filter(|(r, _)| split.subset_of(&r.reference_id) == Some(Subset::Train))
        .map(|(r, &t)| (r, t))
        .collect();
    if train_records.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let val_records: Vec<(&ImageRecord, f64)> = manifest
        .records
        .iter()
        .zip(targets.iter())
        .filter(|(r, _)| split.subset_of(&r.reference_id) == Some(Subset::Val))
        .map(|(r, &t)| (r, t))
        .collect();

    let mut model = model;
    let mut optimizer = AdamW::new(&model.store, cfg.lr_initial, cfg.weight_decay);
    let mut cache = ImageCache::<F>::new(norm.clone());
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ParameterStore<F>)> = None;

    for epoch in 1..=cfg.epochs {
        optimizer.lr = cfg.lr_at_epoch(epoch);

        let mut order: Vec<usize> = (0..train_records.len()).collect();
        let mut rng = derive_rng(cfg.seed, &[0x65706f6368, epoch as u64]); // "epoch"
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch_records: Vec<(&ImageRecord, f64)> =
                chunk.iter().map(|&i| train_records[i]).collect();
            // Isolation guard: gradient updates only ever see train refs.
            for (record, _) in &batch_records {
                if split.subset_of(&record.reference_id) != Some(Subset::Train) {
                    return Err(Error::Contract {
                        op: "train",
                        reason: format!(
                            "record {:?} is not in the training split",
                            record.distorted_path
                        ),
                    });
                }
            }
            let batch = assemble_batch(
                &batch_records,
                &mut cache,
                sampler,
                cfg.patches_train,
                cfg.seed,
                epoch,
            )?;

            let mut g = Graph::new(&model.store);
            let loss = batch_loss_graph(&model, &mut g, &batch, cfg.rank_eps, cfg.rank_reduction)?;
            let loss_value = g.tape.value(loss).data()[0].as_f64();
            if !loss_value.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step: steps,
                    reason: format!("non-finite loss {loss_value}"),
                });
            }
            let grads = g.backward(loss)?;
            drop(g);
            model.store.zero_grads();
            model.store.accumulate(&grads);
            optimizer.step(&mut model.store);

            epoch_loss += loss_value;
            steps += 1;
        }
        let train_loss = epoch_loss / steps.max(1) as f64;

        let val_srocc = if val_records.len() >= 2 {
            validation_srocc(&model, &val_records, sampler, &mut cache, cfg, epoch)?
        } else {
            f64::NAN
        };

        history.push(EpochStats {
            epoch,
            train_loss,
            val_srocc,
            lr: optimizer.lr,
        });
        on_epoch(&model, history.last().expect("just pushed"))?;

        if val_srocc.is_finite() && best.as_ref().is_none_or(|(s, _, _)| val_srocc > *s) {
            best = Some((val_srocc, epoch, model.store.clone()));
        }
    }

    let (best_epoch, final_store) = match best {
        Some((_, epoch, store)) => (Some(epoch), store),
        None => (None, model.store.clone()),
    };
    Ok(TrainOutcome {
        model: VtamiqModel {
            config: model.config,
            store: final_store,
        },
        history,
        best_epoch,
    })
}

fn validation_srocc<F: Scalar>(
    model: &VtamiqModel<F>,
    val_records: &[(&ImageRecord, f64)],
    sampler: &SamplerConfig,
    cache: &mut ImageCache<F>,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<f64> {
    let mut predictions = Vec::with_capacity(val_records.len());
    let mut targets = Vec::with_capacity(val_records.len());
    let batch = assemble_batch(
        val_records,
        cache,
        sampler,
        cfg.patches_eval,
        cfg.seed ^ 0x76616c, // "val" sampling stream
        epoch,
    )?;
    for (seq_ref, seq_dist, target) in &batch {
        predictions.push(model.predict_pair(seq_ref, seq_dist)?.value);
        targets.push(*target);
    }
    Ok(evaluation::srocc(&predictions, &targets).unwrap_or(f64::NAN))
}

// ── Gradient verification ───────────────────────────────────────────

/// Worst relative disagreement between reverse-mode and central-difference
/// gradients, one entry per parameter.
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub step: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn worst(&self) -> &GradCheckEntry {
        self.entries
            .iter()
            .max_by(|a, b| a.max_rel_err.partial_cmp(&b.max_rel_err).expect("finite"))
            .expect("non-empty report")
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err() < tolerance
    }
}

/// Compares reverse-mode gradients of the full batch loss against central
/// finite differences, parameter by parameter, on a frozen sample batch.
/// Meant to run on an `f64` model.
pub fn gradient_check<F: Scalar>(
    model: &VtamiqModel<F>,
    batch: &[SampledPair<F>],
    rank_eps: f64,
    reduction: RankReduction,
    h: f64,
) -> Result<GradCheckReport> {
    gradient_check_with(model, batch, rank_eps, reduction, h, false)
}

/// [`gradient_check`] with an optional deliberate fault: corrupting one
/// reverse-mode gradient before the comparison, to prove the gate trips.
pub fn gradient_check_with<F: Scalar>(
    model: &VtamiqModel<F>,
    batch: &[SampledPair<F>],
    rank_eps: f64,
    reduction: RankReduction,
    h: f64,
    inject_fault: bool,
) -> Result<GradCheckReport> {
    if batch.is_empty() {
        return Err(Error::Contract {
            op: "gradient_check",
            reason: "empty batch".into(),
        });
    }

    // Reverse-mode gradients.
    let mut g = Graph::new(&model.store);
    let loss = batch_loss_graph(model, &mut g, batch, rank_eps, reduction)?;
    let grads = g.backward(loss)?;
    drop(g);
    let mut ad_store = model.store.clone();
    ad_store.zero_grads();
    ad_store.accumulate(&grads);
    if inject_fault {
        let corrupted = crate::tensor::tape::ParamGrads {
            grads: vec![(0, {
                let mut g = vec![F::zero(); ad_store.by_index(0).numel()];
                g[0] = F::one();
                g
            })],
        };
        ad_store.accumulate(&corrupted);
    }

    // Finite-difference oracle over a scratch copy of the parameters.
    let config = model.config.clone();
    let mut scratch = model.store.clone();
    let fd = finite_diff_gradient(
        |store: &ParameterStore<F>| {
            let probe = VtamiqModel {
                config: config.clone(),
                store: store.clone(),
            };
            let mut g = Graph::new(&probe.store);
            let loss = batch_loss_graph(&probe, &mut g, batch, rank_eps, reduction)?;
            Ok(g.tape.value(loss).data()[0])
        },
        &mut scratch,
        F::from_f64(h),
    )?;

    let mut entries = Vec::with_capacity(ad_store.len());
    for p in ad_store.iter() {
        let oracle = &fd[p.name()];
        let mut max_rel = 0.0f64;
        for (&a, &o) in p.grad().data().iter().zip(oracle.data().iter()) {
            max_rel = max_rel.max(relative_error(a.as_f64(), o.as_f64()));
        }
        entries.push(GradCheckEntry {
            name: p.name().to_string(),
            max_rel_err: max_rel,
        });
    }
    Ok(GradCheckReport { entries, step: h })
}

/// Builds a frozen sample batch for [`gradient_check`] from synthetic
/// in-memory images (no dataset required).
pub fn synthetic_gradcheck_batch<F: Scalar>(
    model: &VtamiqModel<F>,
    batch_size: usize,
    n_patches: usize,
    seed: u64,
) -> Result<Vec<SampledPair<F>>> {
    let p = model.config.vit.patch_size;
    let (h, w) = (4 * p, 4 * p);
    let sampler = SamplerConfig {
        patch_size: p,
        ..SamplerConfig::default()
    };
    let mut batch = Vec::with_capacity(batch_size);
    for b in 0..batch_size {
        let mut rng = derive_rng(seed, &[0x67726164, b as u64]); // "grad"
        use rand::Rng;
        let reference =
            Tensor::<F>::from_fn(&[h, w, 3], |_| F::from_f64(rng.random::<f64>() * 2.0 - 1.0));
        let distorted = Tensor::<F>::from_fn(&[h, w, 3], |i| {
            let base = reference.data()[i].as_f64();
            F::from_f64(base + 0.2 * (rng.random::<f64>() - 0.5))
        });
        let pmap = build_probability_map(&reference, &distorted, &sampler)?;
        let (seq_ref, seq_dist) =
            sample_patches(&reference, &distorted, &pmap, n_patches, p, seed + b as u64)?;
        batch.push((seq_ref, seq_dist, 0.2 + 0.25 * b as f64));
    }
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn lr_schedule_steps_at_decay_epoch() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at_epoch(1), 1e-5);
        assert_eq!(cfg.lr_at_epoch(11), 1e-5);
        assert!((cfg.lr_at_epoch(12) - 1e-6).abs() < 1e-18);
        assert!((cfg.lr_at_epoch(20) - 1e-6).abs() < 1e-18);
    }

    #[test]
    fn adamw_zero_lr_leaves_parameters_bitwise_unchanged() {
        let model = VtamiqModel::<f32>::new(ModelConfig::tiny(), 5).unwrap();
        let batch = synthetic_gradcheck_batch(&model, 2, 4, 9).unwrap();
        let before = model.store.value_bits();

        let mut model = model;
        let mut opt = AdamW::new(&model.store, 0.0, 0.0);
        for _ in 0..3 {
            let mut g = Graph::new(&model.store);
            let loss = batch_loss_graph(&model, &mut g, &batch, 1e-6, RankReduction::Mean).unwrap();
            let grads = g.backward(loss).unwrap();
            drop(g);
            model.store.zero_grads();
            model.store.accumulate(&grads);
            opt.step(&mut model.store);
        }
        assert_eq!(model.store.value_bits(), before);
    }

    #[test]
    fn single_sample_overfit_decreases_loss() {
        let model = VtamiqModel::<f32>::new(ModelConfig::tiny(), 6).unwrap();
        let batch = synthetic_gradcheck_batch(&model, 1, 6, 11).unwrap();

        let mut model = model;
        let mut opt = AdamW::new(&model.store, 1e-3, 0.0);
        let mut losses_seen = Vec::new();
        for _ in 0..6 {
            let mut g = Graph::new(&model.store);
            let loss = batch_loss_graph(&model, &mut g, &batch, 1e-6, RankReduction::Mean).unwrap();
            losses_seen.push(g.tape.value(loss).data()[0] as f64);
            let grads = g.backward(loss).unwrap();
            drop(g);
            model.store.zero_grads();
            model.store.accumulate(&grads);
            opt.step(&mut model.store);
        }
        for w in losses_seen.windows(2) {
            assert!(w[1] < w[0], "loss not strictly decreasing: {losses_seen:?}");
        }
    }

    #[test]
    fn gradient_check_tiny_model_passes_and_covers_all_params() {
        let config = ModelConfig {
            vit: crate::encoder::ViTConfig {
                patch_size: 4,
                hidden_size: 8,
                num_layers: 1,
                num_heads: 2,
                mlp_ratio: 1.0,
                pos_grid: 2,
            },
            diffnet: crate::diffnet::DiffNetConfig {
                num_groups: 1,
                blocks_per_group: 1,
                reduction: 2,
                head_widths: vec![4],
                ..Default::default()
            },
        };
        let model = VtamiqModel::<f64>::new(config, 7).unwrap();
        let batch = synthetic_gradcheck_batch(&model, 2, 3, 13).unwrap();
        let report = gradient_check(&model, &batch, 1e-6, RankReduction::Mean, 1e-5).unwrap();

        assert_eq!(report.entries.len(), model.store.len());
        let mut names: Vec<&str> = report.entries.iter().map(|e| e.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), model.store.len(), "duplicate report entries");
        assert!(
            report.passes(1e-4),
            "worst {} at {}",
            report.worst().max_rel_err,
            report.worst().name
        );
    }

    #[test]
    fn history_csv_shape() {
        let history = vec![
            EpochStats {
                epoch: 1,
                train_loss: 0.5,
                val_srocc: 0.25,
                lr: 1e-5,
            },
            EpochStats {
                epoch: 2,
                train_loss: 0.25,
                val_srocc: f64::NAN,
                lr: 1e-6,
            },
        ];
        let csv = history_to_csv(&history);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "epoch,train_loss,val_srocc,lr");
        assert!(lines[1].starts_with("1,0.5"));
        assert!(lines[2].contains("NaN"));
    }
}
