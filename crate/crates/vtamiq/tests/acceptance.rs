//! Acceptance suite. Each test prints one pass/fail line; run with
//! `cargo test --test acceptance -- --nocapture` to see them all.
//!
//! Expected values come from independent in-file oracles (brute-force pair
//! loops, direct-definition correlations, Monte Carlo frequencies), never
//! from the implementation under test.

use rand::Rng;

use vtamiq::datasets::{split_by_reference, DatasetManifest, ImageRecord, ScoreDirection};
use vtamiq::diffnet::DiffNetConfig;
use vtamiq::encoder::ViTConfig;
use vtamiq::losses::{batch_rank_loss, pairwise_rank_loss, RankReduction};
use vtamiq::model::{ModelConfig, VtamiqModel};
use vtamiq::sampler::{build_probability_map, sample_patches, PatchSequence, SamplerConfig};
use vtamiq::tensor::{derive_rng, Tensor};

fn check(name: &str, body: impl FnOnce() -> Result<(), String>) {
    match body() {
        Ok(()) => println!("acceptance {name}: PASS"),
        Err(reason) => {
            println!("acceptance {name}: FAIL - {reason}");
            panic!("acceptance {name} failed: {reason}");
        }
    }
}

// ── 1. Parameter accounting ─────────────────────────────────────────

#[test]
fn criterion_01_parameter_accounting() {
    check("criterion 1 (parameter accounting)", || {
        let model = VtamiqModel::<f32>::new(ModelConfig::vtamiq_16_6_4_4(), 0)
            .map_err(|e| e.to_string())?;
        let report = model.param_counts();
        let vit = report.vit_total() as f64;
        let total = report.total() as f64;
        let within = |value: f64, target: f64| (value - target).abs() <= 0.05 * target;
        if !within(vit, 43.6e6) {
            return Err(format!("ViT-side parameters {vit} outside 43.6M +-5%"));
        }
        if !within(total, 57.3e6) {
            return Err(format!("total parameters {total} outside 57.3M +-5%"));
        }
        Ok(())
    });
}

// ── 2. Gradient integrity ───────────────────────────────────────────

fn gradcheck_model() -> VtamiqModel<f64> {
    let config = ModelConfig {
        vit: ViTConfig {
            patch_size: 4,
            hidden_size: 16,
            num_layers: 1,
            num_heads: 2,
            mlp_ratio: 2.0,
            pos_grid: 4,
        },
        diffnet: DiffNetConfig {
            num_groups: 1,
            blocks_per_group: 1,
            reduction: 4,
            ..Default::default()
        },
    };
    VtamiqModel::new(config, 17).expect("tiny model")
}

#[test]
fn criterion_02_gradient_integrity() {
    check("criterion 2 (gradient integrity)", || {
        let model = gradcheck_model();
        let batch = vtamiq::training::synthetic_gradcheck_batch(&model, 3, 4, 23)
            .map_err(|e| e.to_string())?;
        let report =
            vtamiq::training::gradient_check(&model, &batch, 1e-6, RankReduction::Mean, 1e-5)
                .map_err(|e| e.to_string())?;
        if report.entries.len() != model.store.len() {
            return Err("report does not cover every parameter".into());
        }
        if !report.passes(1e-4) {
            let worst = report.worst();
            return Err(format!(
                "max relative error {} at {} exceeds 1e-4",
                worst.max_rel_err, worst.name
            ));
        }
        Ok(())
    });
}

// ── 3. Loss oracles ─────────────────────────────────────────────────

#[test]
fn criterion_03_loss_oracles() {
    check("criterion 3 (loss oracles)", || {
        let mut rng = derive_rng(31, &[3]);
        for case in 0..1000 {
            let n = 2 + (rng.random::<u32>() % 19) as usize; // N <= 20
            let y: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
            let yh: Vec<f64> = (0..n)
                .map(|_| {
                    if rng.random::<f64>() < 0.2 {
                        1.0 // force ties in expected scores
                    } else {
                        rng.random::<f64>() * 4.0 - 2.0
                    }
                })
                .collect();
            let eps = 1e-6;

            // Brute-force double loop, written from the formula.
            let mut total = 0.0;
            let mut pairs = 0.0;
            for i in 0..n {
                for j in i + 1..n {
                    let gap = yh[i] - yh[j];
                    total += (-(gap) * (y[i] - y[j]) / (gap.abs() + eps)).max(0.0);
                    pairs += 1.0;
                }
            }
            for (reduction, oracle) in [
                (RankReduction::Sum, total),
                (RankReduction::Mean, total / pairs),
            ] {
                let got = batch_rank_loss(&y, &yh, eps, reduction).map_err(|e| e.to_string())?;
                if (got - oracle).abs() > 1e-12 {
                    return Err(format!("case {case}: {got} vs oracle {oracle}"));
                }
            }
        }

        // Ranking-loss sign grid: agreement and ties are exactly zero,
        // disagreement is strictly positive.
        let grid = [-1.5, 0.0, 2.0];
        for &y1 in &grid {
            for &y2 in &grid {
                for &t1 in &grid {
                    for &t2 in &grid {
                        let loss = pairwise_rank_loss(y1, y2, t1, t2, 1e-6);
                        let agree = (t1 - t2) * (y1 - y2) > 0.0 || t1 == t2;
                        if agree && loss != 0.0 {
                            return Err(format!("agreement ({y1},{y2},{t1},{t2}) gave {loss}"));
                        }
                        if !agree && y1 != y2 && loss <= 0.0 {
                            return Err(format!("disagreement ({y1},{y2},{t1},{t2}) gave {loss}"));
                        }
                    }
                }
            }
        }
        Ok(())
    });
}

// ── 4. Correlation oracles ──────────────────────────────────────────

fn oracle_ranks(v: &[f64]) -> Vec<f64> {
    let n = v.len();
    let mut ranks = vec![0.0; n];
    for i in 0..n {
        let mut less = 0usize;
        let mut equal = 0usize;
        for j in 0..n {
            if v[j] < v[i] {
                less += 1;
            } else if v[j] == v[i] {
                equal += 1;
            }
        }
        // Average of ranks less+1 ..= less+equal.
        ranks[i] = less as f64 + (equal as f64 + 1.0) / 2.0;
    }
    ranks
}

fn oracle_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let cov = x
        .iter()
        .zip(y.iter())
        .map(|(a, b)| (a - mx) * (b - my))
        .sum::<f64>();
    let vx = x.iter().map(|a| (a - mx) * (a - mx)).sum::<f64>();
    let vy = y.iter().map(|b| (b - my) * (b - my)).sum::<f64>();
    cov / (vx * vy).sqrt()
}

fn oracle_tau_b(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len();
    let (mut c, mut d, mut tx, mut ty) = (0.0_f64, 0.0_f64, 0.0_f64, 0.0_f64);
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
    (c - d) / ((c + d + tx) * (c + d + ty)).sqrt()
}

#[test]
fn criterion_04_correlation_oracles() {
    check("criterion 4 (correlation oracles)", || {
        use vtamiq::evaluation::{krocc, plcc, srocc};
        let mut rng = derive_rng(41, &[4]);
        let mut checked = 0;
        while checked < 1000 {
            let n = 2 + (rng.random::<u32>() % 99) as usize; // n <= 100
                                                             // Quantize with random granularity so ties are common.
            let levels = 2.0 + (rng.random::<f64>() * 30.0).floor();
            let x: Vec<f64> = (0..n)
                .map(|_| (rng.random::<f64>() * levels).round() / levels)
                .collect();
            let y: Vec<f64> = (0..n)
                .map(|_| (rng.random::<f64>() * levels).round() / levels)
                .collect();
            let (Ok(p), Ok(s), Ok(k)) = (plcc(&x, &y), srocc(&x, &y), krocc(&x, &y)) else {
                continue; // constant draw, undefined by contract
            };
            let po = oracle_pearson(&x, &y);
            let so = oracle_pearson(&oracle_ranks(&x), &oracle_ranks(&y));
            let ko = oracle_tau_b(&x, &y);
            if (p - po).abs() > 1e-12 || (s - so).abs() > 1e-12 || (k - ko).abs() > 1e-12 {
                return Err(format!(
                    "n={n}: plcc {p} vs {po}, srocc {s} vs {so}, krocc {k} vs {ko}"
                ));
            }
            checked += 1;
        }

        // Exact invariance of the rank metrics under strictly monotone maps.
        let x: Vec<f64> = (0..60).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let y: Vec<f64> = (0..60).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let s0 = srocc(&x, &y).map_err(|e| e.to_string())?;
        let k0 = krocc(&x, &y).map_err(|e| e.to_string())?;
        let transforms: [fn(f64) -> f64; 3] = [|v| v.exp(), |v| 5.0 * v + 2.0, |v| v * v * v];
        for t in transforms {
            let tx: Vec<f64> = x.iter().map(|&v| t(v)).collect();
            if srocc(&tx, &y).map_err(|e| e.to_string())? != s0 {
                return Err("SROCC not exactly invariant under monotone transform".into());
            }
            if krocc(&tx, &y).map_err(|e| e.to_string())? != k0 {
                return Err("KROCC not exactly invariant under monotone transform".into());
            }
        }
        Ok(())
    });
}

// ── 5. Encoder set-invariance ───────────────────────────────────────

fn random_sequence(cfg: &ViTConfig, n: usize, seed: u64) -> PatchSequence<f32> {
    let mut rng = derive_rng(seed, &[5]);
    let p = cfg.patch_size;
    PatchSequence {
        patches: Tensor::from_fn(&[n, p, p, 3], |_| rng.random::<f32>() * 2.0 - 1.0),
        uv: (0..n)
            .map(|_| (rng.random::<f64>(), rng.random::<f64>()))
            .collect(),
        source_size: (64, 64),
    }
}

fn permute_sequence(seq: &PatchSequence<f32>, order: &[usize]) -> PatchSequence<f32> {
    let p = seq.patch_size();
    let stride = p * p * 3;
    let mut data = Vec::with_capacity(seq.patches.numel());
    let mut uv = Vec::with_capacity(order.len());
    for &k in order {
        data.extend_from_slice(&seq.patches.data()[k * stride..(k + 1) * stride]);
        uv.push(seq.uv[k]);
    }
    PatchSequence {
        patches: Tensor::new(vec![order.len(), p, p, 3], data).expect("permuted stack"),
        uv,
        source_size: seq.source_size,
    }
}

#[test]
fn criterion_05_encoder_set_invariance() {
    check("criterion 5 (encoder set-invariance)", || {
        let cfg = ViTConfig::tiny();
        let model = VtamiqModel::<f32>::new(
            ModelConfig {
                vit: cfg.clone(),
                diffnet: DiffNetConfig::tiny(),
            },
            51,
        )
        .map_err(|e| e.to_string())?;

        let n = 12;
        let seq = random_sequence(&cfg, n, 52);
        let base = model.encode(&seq).map_err(|e| e.to_string())?.vector;

        let mut rng = derive_rng(53, &[5]);
        for trial in 0..100 {
            let mut order: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                let j = (rng.random::<u64>() % (i as u64 + 1)) as usize;
                order.swap(i, j);
            }
            let permuted = permute_sequence(&seq, &order);
            let out = model.encode(&permuted).map_err(|e| e.to_string())?.vector;
            for (a, b) in base.data().iter().zip(out.data().iter()) {
                if (a - b).abs() > 1e-5 {
                    return Err(format!("trial {trial}: |{a} - {b}| > 1e-5"));
                }
            }
        }

        // Positional sensitivity: shifting every uv one grid cell to the
        // right must change the output.
        let g = cfg.pos_grid as f64;
        let shifted = PatchSequence {
            patches: seq.patches.clone(),
            uv: seq
                .uv
                .iter()
                .map(|&(u, v)| (u, ((v * g).floor() + 1.5).min(g - 0.5) / g))
                .collect(),
            source_size: seq.source_size,
        };
        let out = model.encode(&shifted).map_err(|e| e.to_string())?.vector;
        let delta: f32 = base
            .data()
            .iter()
            .zip(out.data().iter())
            .map(|(a, b)| (a - b).abs())
            .sum();
        if delta <= 1e-6 {
            return Err(format!("positional shift changed output by only {delta}"));
        }
        Ok(())
    });
}

// ── 6. Zero-difference collapse ─────────────────────────────────────

#[test]
fn criterion_06_zero_difference_collapse() {
    check("criterion 6 (zero-difference collapse)", || {
        let model = VtamiqModel::<f32>::new(ModelConfig::tiny(), 61).map_err(|e| e.to_string())?;
        let d = model.config.vit.hidden_size;

        let mut constant = None;
        let mut rng = derive_rng(62, &[6]);
        for trial in 0..100 {
            let f = Tensor::<f32>::from_fn(&[d], |_| rng.random::<f32>() * 4.0 - 2.0);
            let score = model
                .predict_features(&f, &f)
                .map_err(|e| e.to_string())?
                .value;
            match constant {
                None => constant = Some(score),
                Some(c) if c != score => {
                    return Err(format!("trial {trial}: {score} != {c} (not exact)"))
                }
                _ => {}
            }
        }

        // Identical image pairs through the full pipeline.
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        vtamiq::synthetic::generate_toy_dataset(
            dir.path(),
            &vtamiq::synthetic::ToyDatasetSpec {
                n_references: 10,
                blur_levels: 1,
                size: 32,
                seed: 63,
            },
        )
        .map_err(|e| e.to_string())?;
        let norm = vtamiq::datasets::NormalizationSpec::default();
        let sampler = SamplerConfig {
            patch_size: model.config.vit.patch_size,
            ..SamplerConfig::default()
        };
        let mut pipeline_constant = None;
        for r in 0..10 {
            let path = dir.path().join(format!("ref{r:03}.png"));
            let image = vtamiq::datasets::load_image_normalized::<f32>(&path, &norm)
                .map_err(|e| e.to_string())?;
            let pmap =
                build_probability_map(&image, &image, &sampler).map_err(|e| e.to_string())?;
            let (seq_ref, seq_dist) =
                sample_patches(&image, &image, &pmap, 16, sampler.patch_size, 64 + r)
                    .map_err(|e| e.to_string())?;
            let score = model
                .predict_pair(&seq_ref, &seq_dist)
                .map_err(|e| e.to_string())?
                .value;
            match pipeline_constant {
                None => pipeline_constant = Some(score),
                Some(c) if c != score => {
                    return Err(format!("image {r}: {score} != {c} (not constant)"))
                }
                _ => {}
            }
        }
        Ok(())
    });
}

// ── 7. CAPS distribution ────────────────────────────────────────────

#[test]
fn criterion_07_caps_distribution() {
    check("criterion 7 (CAPS distribution)", || {
        // 14x14 grid of valid positions: 17x17 image with 4-pixel patches.
        let p = 4;
        let side = 17;
        let mut rng = derive_rng(71, &[7]);
        let reference = Tensor::<f64>::from_fn(&[side, side, 3], |_| rng.random::<f64>());
        let distorted = Tensor::<f64>::from_fn(&[side, side, 3], |i| {
            reference.data()[i] + 0.1 * (rng.random::<f64>() - 0.5)
        });
        let sampler = SamplerConfig {
            patch_size: p,
            ..SamplerConfig::default()
        };
        let pmap =
            build_probability_map(&reference, &distorted, &sampler).map_err(|e| e.to_string())?;
        let (hc, wc) = pmap.grid_size();
        if (hc, wc) != (14, 14) {
            return Err(format!("expected a 14x14 map, got {hc}x{wc}"));
        }

        let n = 1_000_000;
        let (seq, _) =
            sample_patches(&reference, &distorted, &pmap, n, p, 72).map_err(|e| e.to_string())?;
        // Monte Carlo frequency oracle keyed by recovered grid position.
        let mut counts = vec![0.0_f64; hc * wc];
        let scale = (side - 1) as f64;
        let half = (p as f64 - 1.0) / 2.0;
        for &(u, v) in &seq.uv {
            let top = (u * scale - half).round() as usize;
            let left = (v * scale - half).round() as usize;
            counts[top * wc + left] += 1.0;
        }
        let tv: f64 = 0.5
            * pmap
                .grid()
                .iter()
                .zip(counts.iter())
                .map(|(p, c)| (p - c / n as f64).abs())
                .sum::<f64>();
        if tv >= 0.02 {
            return Err(format!("total-variation distance {tv} >= 0.02"));
        }

        // Identical images: exactly the (alpha, beta)-only mixture.
        let with_gamma =
            build_probability_map(&reference, &reference, &sampler).map_err(|e| e.to_string())?;
        let alpha_beta_only = build_probability_map(
            &reference,
            &reference,
            &SamplerConfig {
                gamma: 0.0,
                ..sampler.clone()
            },
        )
        .map_err(|e| e.to_string())?;
        if with_gamma.grid() != alpha_beta_only.grid() {
            return Err("zero-diff CAPS is not exactly the (alpha, beta) mixture".into());
        }
        Ok(())
    });
}

// ── 8. Toy learning ─────────────────────────────────────────────────

#[test]
fn criterion_08_toy_learning() {
    check("criterion 8 (toy learning)", || {
        use vtamiq::datasets::{load_manifest, Subset};
        use vtamiq::evaluation::{evaluate, EvalConfig};
        use vtamiq::training::{train, TrainConfig};

        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let manifest_path = vtamiq::synthetic::generate_toy_dataset(
            dir.path(),
            &vtamiq::synthetic::ToyDatasetSpec {
                n_references: 20,
                blur_levels: 5,
                size: 64,
                seed: 7,
            },
        )
        .map_err(|e| e.to_string())?;
        let manifest = load_manifest(&manifest_path).map_err(|e| e.to_string())?;
        // 15 training references, 5 held out for validation.
        let split =
            split_by_reference(&manifest, (0.75, 0.25, 0.0), 11).map_err(|e| e.to_string())?;
        if split.val.len() != 5 {
            return Err(format!(
                "expected 5 held-out references, got {}",
                split.val.len()
            ));
        }

        let config = ModelConfig {
            vit: ViTConfig {
                patch_size: 8,
                hidden_size: 48,
                num_layers: 2,
                num_heads: 4,
                mlp_ratio: 2.0,
                pos_grid: 4,
            },
            diffnet: DiffNetConfig {
                num_groups: 1,
                blocks_per_group: 1,
                reduction: 4,
                head_widths: vec![24, 12],
                ..Default::default()
            },
        };
        let model = VtamiqModel::<f32>::new(config, 3).map_err(|e| e.to_string())?;
        let sampler = SamplerConfig {
            patch_size: 8,
            ..SamplerConfig::default()
        };
        let train_cfg = TrainConfig {
            batch_size: 20,
            patches_train: 64,
            patches_eval: 128,
            epochs: 50,
            lr_initial: 1e-3,
            lr_decay_epoch: 35,
            lr_decay_factor: 10.0,
            weight_decay: 0.01,
            seed: 5,
            ..TrainConfig::default()
        };
        let norm = vtamiq::datasets::NormalizationSpec::default();
        let outcome = train(model, &manifest, &split, &sampler, &norm, &train_cfg)
            .map_err(|e| e.to_string())?;

        let eval_cfg = EvalConfig {
            n_patches: 128,
            runs: 2,
            seed: 99,
        };
        let train_srocc = evaluate(
            &outcome.model,
            &manifest,
            Some((&split, Subset::Train)),
            &sampler,
            &norm,
            &eval_cfg,
        )
        .map_err(|e| e.to_string())?
        .srocc;
        let val_srocc = evaluate(
            &outcome.model,
            &manifest,
            Some((&split, Subset::Val)),
            &sampler,
            &norm,
            &eval_cfg,
        )
        .map_err(|e| e.to_string())?
        .srocc;

        if train_srocc < 0.9 {
            return Err(format!(
                "train SROCC {train_srocc:.3} < 0.9 after 50 epochs"
            ));
        }
        if val_srocc < 0.7 {
            return Err(format!("validation SROCC {val_srocc:.3} < 0.7"));
        }
        Ok(())
    });
}

// ── 9. Representation stability trend ───────────────────────────────

#[test]
fn criterion_09_stability_trend() {
    check("criterion 9 (stability trend)", || {
        let config = ModelConfig {
            vit: ViTConfig {
                patch_size: 8,
                hidden_size: 16,
                num_layers: 1,
                num_heads: 2,
                mlp_ratio: 2.0,
                pos_grid: 4,
            },
            diffnet: DiffNetConfig::tiny(),
        };
        let model = VtamiqModel::<f32>::new(config, 91).map_err(|e| e.to_string())?;

        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        vtamiq::synthetic::generate_toy_dataset(
            dir.path(),
            &vtamiq::synthetic::ToyDatasetSpec {
                n_references: 10,
                blur_levels: 3,
                size: 64,
                seed: 92,
            },
        )
        .map_err(|e| e.to_string())?;
        let norm = vtamiq::datasets::NormalizationSpec::default();
        let caps = SamplerConfig {
            patch_size: 8,
            ..SamplerConfig::default()
        };
        let uniform = SamplerConfig::uniform(8);

        let trials = 64;
        let patch_counts = [16usize, 64, 256];
        let mut caps_by_n = [0.0_f64; 3];
        let mut uniform_16 = 0.0_f64;
        for r in 0..10 {
            let reference = vtamiq::datasets::load_image_normalized::<f32>(
                dir.path().join(format!("ref{r:03}.png")),
                &norm,
            )
            .map_err(|e| e.to_string())?;
            let distorted = vtamiq::datasets::load_image_normalized::<f32>(
                dir.path().join(format!("ref{r:03}_blur3.png")),
                &norm,
            )
            .map_err(|e| e.to_string())?;

            let caps_map =
                build_probability_map(&reference, &distorted, &caps).map_err(|e| e.to_string())?;
            let uniform_map = build_probability_map(&reference, &distorted, &uniform)
                .map_err(|e| e.to_string())?;

            for (slot, &n) in patch_counts.iter().enumerate() {
                caps_by_n[slot] += vtamiq::evaluation::representation_stability_sampled(
                    &model,
                    &reference,
                    &caps_map,
                    n,
                    trials,
                    930 + r as u64,
                )
                .map_err(|e| e.to_string())?;
            }
            uniform_16 += vtamiq::evaluation::representation_stability_sampled(
                &model,
                &reference,
                &uniform_map,
                16,
                trials,
                950 + r as u64,
            )
            .map_err(|e| e.to_string())?;
        }
        for v in caps_by_n.iter_mut() {
            *v /= 10.0;
        }
        uniform_16 /= 10.0;

        if !(caps_by_n[0] <= caps_by_n[1] && caps_by_n[1] <= caps_by_n[2]) {
            return Err(format!("similarity not non-decreasing in N: {caps_by_n:?}"));
        }
        if caps_by_n[0] < uniform_16 {
            return Err(format!(
                "CAPS similarity {:.4} below uniform {:.4} at N=16",
                caps_by_n[0], uniform_16
            ));
        }
        Ok(())
    });
}

// ── 10. Split protocol ──────────────────────────────────────────────

fn manifest_with_refs(n_refs: usize) -> DatasetManifest {
    let records = (0..n_refs)
        .flat_map(|r| {
            (0..3).map(move |d| ImageRecord {
                reference_path: format!("r{r}.png").into(),
                distorted_path: format!("r{r}_d{d}.png").into(),
                score: d as f64,
                reference_id: format!("ref{r}"),
            })
        })
        .collect();
    DatasetManifest {
        name: "protocol".into(),
        records,
        score_direction: ScoreDirection::HigherIsBetter,
    }
}

#[test]
fn criterion_10_split_protocol() {
    check("criterion 10 (split protocol)", || {
        let live = manifest_with_refs(29);
        let tid = manifest_with_refs(25);
        for seed in 0..100 {
            let s29 =
                split_by_reference(&live, (0.6, 0.2, 0.2), seed).map_err(|e| e.to_string())?;
            if (s29.train.len(), s29.val.len(), s29.test.len()) != (17, 6, 6) {
                return Err(format!(
                    "seed {seed}: 29 refs split {}/{}/{}",
                    s29.train.len(),
                    s29.val.len(),
                    s29.test.len()
                ));
            }
            let s25 = split_by_reference(&tid, (0.6, 0.2, 0.2), seed).map_err(|e| e.to_string())?;
            if (s25.train.len(), s25.val.len(), s25.test.len()) != (15, 5, 5) {
                return Err(format!(
                    "seed {seed}: 25 refs split {}/{}/{}",
                    s25.train.len(),
                    s25.val.len(),
                    s25.test.len()
                ));
            }
            // Zero leakage: disjoint and exhaustive.
            for (manifest, split) in [(&live, &s29), (&tid, &s25)] {
                let mut seen = std::collections::BTreeSet::new();
                for set in [&split.train, &split.val, &split.test] {
                    for id in set {
                        if !seen.insert(id.clone()) {
                            return Err(format!("seed {seed}: reference {id} in two subsets"));
                        }
                    }
                }
                if seen.len() != manifest.reference_ids().len() {
                    return Err(format!("seed {seed}: split does not cover all references"));
                }
            }
        }
        Ok(())
    });
}
