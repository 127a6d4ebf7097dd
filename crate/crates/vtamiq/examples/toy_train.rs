//! Toy-scale training walkthrough on the synthetic blur-ladder dataset.
//! Useful for eyeballing convergence; the acceptance suite runs the same
//! protocol with fixed thresholds.

use vtamiq::datasets::{load_manifest, split_by_reference, NormalizationSpec, Subset};
use vtamiq::diffnet::DiffNetConfig;
use vtamiq::encoder::ViTConfig;
use vtamiq::evaluation::{evaluate, EvalConfig};
use vtamiq::model::{ModelConfig, VtamiqModel};
use vtamiq::sampler::SamplerConfig;
use vtamiq::synthetic::{generate_toy_dataset, ToyDatasetSpec};
use vtamiq::training::{train, TrainConfig};

fn main() {
    let start = std::time::Instant::now();
    let dir = std::env::temp_dir().join("vtamiq-toy-train");
    let manifest_path = generate_toy_dataset(
        &dir,
        &ToyDatasetSpec {
            n_references: 20,
            blur_levels: 5,
            size: 64,
            seed: 7,
        },
    )
    .unwrap();
    let manifest = load_manifest(&manifest_path).unwrap();
    let split = split_by_reference(&manifest, (0.75, 0.25, 0.0), 11).unwrap();
    println!(
        "dataset: {} records, split {}/{}/{} (t={:?})",
        manifest.records.len(),
        split.train.len(),
        split.val.len(),
        split.test.len(),
        start.elapsed()
    );

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
    let model = VtamiqModel::<f32>::new(config, 3).unwrap();
    println!("model: {} parameters", model.store.total_count());

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
    let norm = NormalizationSpec::default();
    let outcome = train(model, &manifest, &split, &sampler, &norm, &train_cfg).unwrap();
    for row in &outcome.history {
        if row.epoch % 5 == 0 || row.epoch <= 3 {
            println!(
                "epoch {:>2}  loss {:.4}  val_srocc {:+.3}  lr {:e}",
                row.epoch, row.train_loss, row.val_srocc, row.lr
            );
        }
    }
    println!(
        "best epoch: {:?}  (t={:?})",
        outcome.best_epoch,
        start.elapsed()
    );

    let eval_cfg = EvalConfig {
        n_patches: 128,
        runs: 2,
        seed: 99,
    };
    let train_report = evaluate(
        &outcome.model,
        &manifest,
        Some((&split, Subset::Train)),
        &sampler,
        &norm,
        &eval_cfg,
    )
    .unwrap();
    let val_report = evaluate(
        &outcome.model,
        &manifest,
        Some((&split, Subset::Val)),
        &sampler,
        &norm,
        &eval_cfg,
    )
    .unwrap();
    println!("train srocc {:+.3}", train_report.srocc);
    println!("val   srocc {:+.3}", val_report.srocc);
    println!("total time {:?}", start.elapsed());
}
