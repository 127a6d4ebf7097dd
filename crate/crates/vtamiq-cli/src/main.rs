//! `vtamiq` command-line entry point.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage/config error,
//! 3 runtime divergence.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use vtamiq::checkpoint;
use vtamiq::config::{Precision, RunConfig};
use vtamiq::datasets::{
    load_image_normalized, load_manifest, split_by_reference, NormalizationSpec, Subset,
};
use vtamiq::diffnet::DiffNetConfig;
use vtamiq::encoder::ViTConfig;
use vtamiq::error::Error;
use vtamiq::evaluation::{cross_database_evaluate, evaluate};
use vtamiq::model::{ModelConfig, VtamiqModel};
use vtamiq::sampler::{build_probability_map, sample_patches, DiffMetric, SamplerConfig};
use vtamiq::tensor::{Dtype, Scalar};
use vtamiq::training::{
    gradient_check_with, history_to_csv, synthetic_gradcheck_batch, train_with,
};

#[derive(Parser)]
#[command(
    name = "vtamiq",
    version,
    about = "Full-reference image quality assessment"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model per the run configuration.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split (PLCC/SROCC/KROCC).
    Eval(EvalArgs),
    /// Predict the quality score for one reference/distorted pair.
    Predict(PredictArgs),
    /// Emit the CAPS probability map for an image pair as PNG + CSV.
    SampleMap(SampleMapArgs),
    /// Verify reverse-mode gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Print per-component parameter counts for a configuration.
    ParamCount(ParamCountArgs),
    /// Cross-database evaluation matrix over checkpoints and datasets.
    Crossdb(CrossdbArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides config and VTAMIQ_OUTPUT_ROOT).
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Epoch count override.
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset manifest; defaults to the config's dataset.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Treat the dataset as fully unseen (no split, all records).
    #[arg(long)]
    cross_db: bool,
    /// Evaluation runs override.
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    reference: PathBuf,
    #[arg(long)]
    distorted: PathBuf,
    /// Patches sampled per image.
    #[arg(long, default_value_t = 256)]
    patches: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SampleMapArgs {
    #[arg(long)]
    reference: PathBuf,
    #[arg(long)]
    distorted: PathBuf,
    /// Output prefix; writes `<prefix>.png` and `<prefix>.csv`.
    #[arg(long)]
    out_prefix: PathBuf,
    #[arg(long, default_value_t = 0.2)]
    alpha: f64,
    #[arg(long, default_value_t = 0.3)]
    beta: f64,
    #[arg(long, default_value_t = 0.5)]
    gamma: f64,
    #[arg(long, default_value_t = 0.25)]
    sigma_center: f64,
    #[arg(long, value_enum, default_value_t = DiffMetricArg::Mse)]
    diff_metric: DiffMetricArg,
    #[arg(long, default_value_t = 16)]
    patch_size: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum DiffMetricArg {
    Mse,
    SsimLocal,
}

impl From<DiffMetricArg> for DiffMetric {
    fn from(v: DiffMetricArg) -> Self {
        match v {
            DiffMetricArg::Mse => DiffMetric::Mse,
            DiffMetricArg::SsimLocal => DiffMetric::SsimLocal,
        }
    }
}

#[derive(Args)]
struct GradcheckArgs {
    /// Optional run configuration naming the model to check (tiny default).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Deliberately corrupt one gradient to prove the gate trips.
    #[arg(long)]
    inject_fault: bool,
}

#[derive(Args)]
struct ParamCountArgs {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct CrossdbArgs {
    #[arg(long)]
    config: PathBuf,
    /// Checkpoints, one per trained model (matrix rows).
    #[arg(long = "checkpoint", required = true)]
    checkpoints: Vec<PathBuf>,
    /// Dataset manifests (matrix columns).
    #[arg(long = "dataset", required = true)]
    datasets: Vec<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(classify(&e))
        }
    }
}

fn classify(e: &Error) -> u8 {
    match e {
        Error::Verification(_) => 1,
        Error::Divergence { .. } => 3,
        _ => 2,
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Predict(args) => cmd_predict(args),
        Command::SampleMap(args) => cmd_sample_map(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::ParamCount(args) => cmd_param_count(args),
        Command::Crossdb(args) => cmd_crossdb(args),
    }
}

/// Output directory: flag > config > $VTAMIQ_OUTPUT_ROOT/<command> >
/// ./vtamiq-out/<command>.
fn resolve_output_dir(
    flag: Option<PathBuf>,
    from_config: Option<&PathBuf>,
    command: &str,
) -> Result<PathBuf, Error> {
    let dir = flag
        .or_else(|| from_config.cloned())
        .or_else(|| {
            std::env::var_os("VTAMIQ_OUTPUT_ROOT").map(|root| PathBuf::from(root).join(command))
        })
        .unwrap_or_else(|| PathBuf::from("vtamiq-out").join(command));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn load_run_config(path: &Path, seed: Option<u64>) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    // One master seed drives training, splitting, and evaluation unless the
    // config pins separate ones.
    cfg.training.seed = cfg.seed;
    Ok(cfg)
}

fn cmd_train(args: TrainArgs) -> Result<(), Error> {
    let mut cfg = load_run_config(&args.config, args.seed)?;
    if let Some(epochs) = args.epochs {
        cfg.training.epochs = epochs;
        if cfg.training.lr_decay_epoch > epochs {
            cfg.training.lr_decay_epoch = epochs;
        }
    }
    let out_dir = resolve_output_dir(args.output_dir, cfg.output_dir.as_ref(), "train")?;
    let dataset = cfg
        .dataset
        .clone()
        .ok_or_else(|| Error::Config("train requires a [dataset] section".into()))?;

    let mut manifest = load_manifest(&dataset.manifest)?;
    manifest.score_direction = dataset.score_direction;
    let split = split_by_reference(&manifest, dataset.split_fractions, cfg.split_seed())?;
    std::fs::write(out_dir.join("split.txt"), split.to_text())
        .map_err(|e| Error::io(out_dir.join("split.txt"), e))?;

    match cfg.precision {
        Precision::F32 => train_and_save::<f32>(&cfg, &manifest, &split, &out_dir),
        Precision::F64 => train_and_save::<f64>(&cfg, &manifest, &split, &out_dir),
    }
}

fn train_and_save<F: Scalar>(
    cfg: &RunConfig,
    manifest: &vtamiq::datasets::DatasetManifest,
    split: &vtamiq::datasets::SplitSpec,
    out_dir: &Path,
) -> Result<(), Error> {
    let model = VtamiqModel::<F>::new(cfg.model.clone(), cfg.seed)?;
    // last.ckpt is refreshed every epoch so interrupted runs keep a usable
    // snapshot; best.ckpt (by validation SROCC) is written at the end.
    let last_path = out_dir.join("last.ckpt");
    let outcome = train_with(
        model,
        manifest,
        split,
        &cfg.effective_sampler(),
        &cfg.normalization,
        &cfg.training,
        |current, _stats| checkpoint::save(current, &last_path),
    )?;
    let history_path = out_dir.join("history.csv");
    std::fs::write(&history_path, history_to_csv(&outcome.history))
        .map_err(|e| Error::io(&history_path, e))?;
    checkpoint::save(&outcome.model, out_dir.join("best.ckpt"))?;
    println!(
        "trained {} epochs; best epoch {:?}; outputs in {}",
        outcome.history.len(),
        outcome.best_epoch,
        out_dir.display()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), Error> {
    let mut cfg = load_run_config(&args.config, args.seed)?;
    if let Some(runs) = args.runs {
        cfg.evaluation.runs = runs;
    }
    cfg.evaluation.seed = cfg.seed;
    let out_dir = resolve_output_dir(args.output_dir.clone(), cfg.output_dir.as_ref(), "eval")?;

    let manifest_path = match (&args.dataset, &cfg.dataset) {
        (Some(p), _) => p.clone(),
        (None, Some(ds)) => ds.manifest.clone(),
        (None, None) => {
            return Err(Error::Config(
                "eval needs --dataset or a [dataset] section".into(),
            ))
        }
    };
    let mut manifest = load_manifest(&manifest_path)?;
    if let Some(ds) = &cfg.dataset {
        if ds.manifest == manifest_path {
            manifest.score_direction = ds.score_direction;
        }
    }

    match checkpoint::peek_dtype(&args.checkpoint)? {
        Dtype::F32 => eval_with::<f32>(&cfg, &args, &manifest, &out_dir),
        Dtype::F64 => eval_with::<f64>(&cfg, &args, &manifest, &out_dir),
    }
}

fn eval_with<F: Scalar>(
    cfg: &RunConfig,
    args: &EvalArgs,
    manifest: &vtamiq::datasets::DatasetManifest,
    out_dir: &Path,
) -> Result<(), Error> {
    let model = checkpoint::load::<F>(&args.checkpoint)?;
    if model.config != cfg.model {
        return Err(Error::Config(format!(
            "checkpoint architecture does not match the [model] section of {}",
            args.config.display()
        )));
    }
    let sampler = cfg.effective_sampler();
    let report = if args.cross_db {
        cross_database_evaluate(
            &model,
            manifest,
            None,
            &sampler,
            &cfg.normalization,
            &cfg.evaluation,
        )?
    } else {
        let ds = cfg.dataset.as_ref().ok_or_else(|| {
            Error::Config("eval without --cross-db needs a [dataset] split".into())
        })?;
        let split = split_by_reference(manifest, ds.split_fractions, cfg.split_seed())?;
        evaluate(
            &model,
            manifest,
            Some((&split, Subset::Test)),
            &sampler,
            &cfg.normalization,
            &cfg.evaluation,
        )?
    };
    let report_path = out_dir.join("report.csv");
    std::fs::write(&report_path, report.to_csv()).map_err(|e| Error::io(&report_path, e))?;
    print!("{}", report.to_table());
    println!("report written to {}", report_path.display());
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> Result<(), Error> {
    match checkpoint::peek_dtype(&args.checkpoint)? {
        Dtype::F32 => predict_with::<f32>(&args),
        Dtype::F64 => predict_with::<f64>(&args),
    }
}

fn predict_with<F: Scalar>(args: &PredictArgs) -> Result<(), Error> {
    let model = checkpoint::load::<F>(&args.checkpoint)?;
    let norm = NormalizationSpec::default();
    let reference = load_image_normalized::<F>(&args.reference, &norm)?;
    let distorted = load_image_normalized::<F>(&args.distorted, &norm)?;
    if reference.shape() != distorted.shape() {
        return Err(Error::Config(format!(
            "image sizes differ: {:?} vs {:?}",
            reference.shape(),
            distorted.shape()
        )));
    }
    let sampler = SamplerConfig {
        patch_size: model.config.vit.patch_size,
        ..SamplerConfig::default()
    };
    let pmap = build_probability_map(&reference, &distorted, &sampler)?;
    let (seq_ref, seq_dist) = sample_patches(
        &reference,
        &distorted,
        &pmap,
        args.patches,
        sampler.patch_size,
        args.seed,
    )?;
    let score = model.predict_pair(&seq_ref, &seq_dist)?;
    println!("{}", score.value);
    Ok(())
}

fn cmd_sample_map(args: SampleMapArgs) -> Result<(), Error> {
    let norm = NormalizationSpec::default();
    let reference = load_image_normalized::<f32>(&args.reference, &norm)?;
    let distorted = load_image_normalized::<f32>(&args.distorted, &norm)?;
    let sampler = SamplerConfig {
        alpha: args.alpha,
        beta: args.beta,
        gamma: args.gamma,
        sigma_center: args.sigma_center,
        diff_metric: args.diff_metric.into(),
        patch_size: args.patch_size,
    };
    let pmap = build_probability_map(&reference, &distorted, &sampler)?;
    let png = args.out_prefix.with_extension("png");
    let csv = args.out_prefix.with_extension("csv");
    if let Some(parent) = png.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    pmap.save_png(&png)?;
    pmap.save_csv(&csv)?;
    let (hc, wc) = pmap.grid_size();
    println!(
        "{}x{} map written to {} / {}",
        hc,
        wc,
        png.display(),
        csv.display()
    );
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<(), Error> {
    let model_config = match &args.config {
        Some(path) => RunConfig::load(path)?.model,
        None => ModelConfig {
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
        },
    };
    // Verification always runs in 64-bit.
    let model = VtamiqModel::<f64>::new(model_config, args.seed)?;
    let batch = synthetic_gradcheck_batch(&model, 3, 4, args.seed)?;
    let report = gradient_check_with(
        &model,
        &batch,
        1e-6,
        Default::default(),
        args.step,
        args.inject_fault,
    )?;
    println!("parameter groups: {}", report.entries.len());
    for entry in &report.entries {
        println!("  {:<40} max rel err {:.3e}", entry.name, entry.max_rel_err);
    }
    let worst = report.worst();
    println!(
        "worst: {} ({:.3e}); tolerance {:.1e}",
        worst.name, worst.max_rel_err, args.tolerance
    );
    if report.passes(args.tolerance) {
        println!("gradient check PASSED");
        Ok(())
    } else {
        Err(Error::Verification(format!(
            "gradient check failed: {} at {:.3e} exceeds {:.1e}",
            worst.name, worst.max_rel_err, args.tolerance
        )))
    }
}

fn cmd_param_count(args: ParamCountArgs) -> Result<(), Error> {
    let cfg = RunConfig::load(&args.config)?;
    let model = VtamiqModel::<f32>::new(cfg.model.clone(), 0)?;
    let report = model.param_counts();
    println!("encoder    {:>12}", report.encoder);
    println!("positional {:>12}", report.positional);
    println!("diffnet    {:>12}", report.diffnet);
    println!("head       {:>12}", report.head);
    println!("vit total  {:>12}", report.vit_total());
    println!("total      {:>12}", report.total());
    Ok(())
}

fn cmd_crossdb(args: CrossdbArgs) -> Result<(), Error> {
    let mut cfg = load_run_config(&args.config, args.seed)?;
    cfg.evaluation.seed = cfg.seed;
    let out_dir = resolve_output_dir(args.output_dir, cfg.output_dir.as_ref(), "crossdb")?;
    let sampler = cfg.effective_sampler();

    let mut datasets = Vec::new();
    for path in &args.datasets {
        datasets.push(load_manifest(path)?);
    }

    let mut csv = String::from("trained_on");
    for d in &datasets {
        csv.push(',');
        csv.push_str(&d.name);
    }
    csv.push('\n');

    for ckpt in &args.checkpoints {
        let row_name = ckpt
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| ckpt.display().to_string());
        csv.push_str(&row_name);
        for dataset in &datasets {
            let srocc = match checkpoint::peek_dtype(ckpt)? {
                Dtype::F32 => {
                    let model = checkpoint::load::<f32>(ckpt)?;
                    cross_database_evaluate(
                        &model,
                        dataset,
                        None,
                        &sampler,
                        &cfg.normalization,
                        &cfg.evaluation,
                    )?
                    .srocc
                }
                Dtype::F64 => {
                    let model = checkpoint::load::<f64>(ckpt)?;
                    cross_database_evaluate(
                        &model,
                        dataset,
                        None,
                        &sampler,
                        &cfg.normalization,
                        &cfg.evaluation,
                    )?
                    .srocc
                }
            };
            csv.push_str(&format!(",{srocc:.6}"));
        }
        csv.push('\n');
    }
    let matrix_path = out_dir.join("crossdb.csv");
    std::fs::write(&matrix_path, &csv).map_err(|e| Error::io(&matrix_path, e))?;
    print!("{csv}");
    println!("matrix written to {}", matrix_path.display());
    Ok(())
}
