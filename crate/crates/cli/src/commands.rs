//! Command implementations.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context};
use icr_core::cascade::{apply_cascade, train_parallel, train_sequential, TrainConfig};
use icr_core::container::{load_model, save_model};
use icr_core::dataset::{
    generate_synthetic, load_dataset, save_pts, write_atomic, write_dataset, AlignmentSample,
    Dataset,
};
use icr_core::incremental::{update_model, UpdateReport};
use icr_core::shape::{EvalConfig, EvalPreset, Shape};

use crate::cli::{
    Cli, Command, EvalArgs, ExperimentArgs, PredictArgs, SynthArgs, TrainArgs, TrainMode,
    UpdateArgs,
};
use crate::evaluate::evaluate_model;
use crate::experiment::run_incremental_experiment;

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Update(args) => cmd_update(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Eval(args) => cmd_eval(args),
        Command::ExperimentIncremental(args) => cmd_experiment(args),
        Command::Synth(args) => cmd_synth(args),
    }
}

/// Loads a dataset directory: `images/`, `annotations/`, and `bboxes.csv`
/// when present (tight expanded boxes otherwise).
fn load_data_dir(dir: &Path) -> anyhow::Result<Dataset> {
    let images = dir.join("images");
    let annotations = dir.join("annotations");
    let bboxes = dir.join("bboxes.csv");
    let bbox_file = bboxes.exists().then_some(bboxes.as_path());
    load_dataset(&images, &annotations, bbox_file)
        .with_context(|| format!("loading dataset from {}", dir.display()))
}

fn train_config_from(
    stages: usize,
    hidden_nodes: usize,
    ridge: f64,
    seed: u64,
    perturbations: usize,
) -> TrainConfig {
    TrainConfig {
        stages,
        hidden_nodes,
        ridge,
        seed,
        perturbations_per_image: perturbations,
        ..TrainConfig::default()
    }
}

fn resolve_eval(
    requested: Option<&str>,
    dataset: &Dataset,
) -> anyhow::Result<EvalConfig> {
    let preset = match requested {
        Some(name) => EvalPreset::from_name(name)?,
        None => dataset.eval_preset(),
    };
    Ok(preset.config(dataset.landmarks())?)
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    let dataset = load_data_dir(&args.data)?;
    let cfg = train_config_from(
        args.stages,
        args.hidden_nodes,
        args.ridge,
        args.seed,
        args.perturbations,
    );
    let model = match args.mode {
        TrainMode::Sequential => train_sequential(dataset.samples(), &cfg)?,
        TrainMode::Parallel => {
            let stats = match &args.stats_in {
                Some(path) => {
                    let donor = load_model(path)
                        .with_context(|| format!("loading statistics from {}", path.display()))?;
                    donor.stats().to_vec()
                }
                None => {
                    log::info!("no --stats-in: estimating statistics with a sequential pass");
                    train_sequential(dataset.samples(), &cfg)?.stats().to_vec()
                }
            };
            train_parallel(dataset.samples(), &stats, &cfg)?
        }
    };
    save_model(&model, &args.out)?;
    println!(
        "trained {}-stage model ({} hidden nodes) on {} images -> {}",
        model.stages().len(),
        args.hidden_nodes,
        dataset.samples().len(),
        args.out.display()
    );
    Ok(())
}

/// New images for an update; a missing or empty images directory means an
/// empty batch (the update is then a no-op), not an error.
fn load_update_batch(dir: &Path) -> anyhow::Result<Vec<AlignmentSample>> {
    let images = dir.join("images");
    let has_images = images.is_dir()
        && fs::read_dir(&images)
            .with_context(|| format!("reading {}", images.display()))?
            .filter_map(|e| e.ok())
            .any(|e| {
                e.path()
                    .extension()
                    .and_then(|x| x.to_str())
                    .is_some_and(|x| {
                        x.eq_ignore_ascii_case("png")
                            || x.eq_ignore_ascii_case("jpg")
                            || x.eq_ignore_ascii_case("jpeg")
                    })
            });
    if !has_images {
        return Ok(Vec::new());
    }
    Ok(load_data_dir(dir)?.into_samples())
}

fn write_update_report(path: &Path, report: &UpdateReport) -> anyhow::Result<()> {
    let mut out = String::from("stage,rows,feature_millis,update_millis\n");
    for s in &report.stages {
        writeln!(
            &mut out,
            "{},{},{},{}",
            s.stage, s.rows, s.feature_millis, s.update_millis
        )?;
    }
    write_atomic(path, out.as_bytes())?;
    Ok(())
}

fn cmd_update(args: UpdateArgs) -> anyhow::Result<()> {
    let model = load_model(&args.model)?;
    let batch = load_update_batch(&args.data)?;
    let (updated, report) = update_model(&model, &batch, args.seed)?;
    save_model(&updated, &args.out)?;
    if let Some(report_path) = &args.report {
        write_update_report(report_path, &report)?;
    }
    println!(
        "absorbed {} images into {} stages in {} ms -> {}",
        batch.len(),
        updated.stages().len(),
        report.total_millis(),
        args.out.display()
    );
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> anyhow::Result<()> {
    let model = load_model(&args.model)?;
    let dataset = load_data_dir(&args.data)?;
    fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("creating {}", args.out_dir.display()))?;
    for sample in dataset.samples() {
        let shape = apply_cascade(&model, &sample.image, &sample.bbox)?;
        // The loader normalized each image to the standard width; divide by
        // the stored scale to express landmarks in source pixels again.
        let original = Shape::from_coords(shape.coords() / sample.scale)?;
        save_pts(&args.out_dir.join(format!("{}.pts", sample.id)), &original)?;
    }
    println!(
        "wrote {} prediction files to {}",
        dataset.samples().len(),
        args.out_dir.display()
    );
    Ok(())
}

fn write_ced_csv(path: &Path, ced: &[(f64, f64)]) -> anyhow::Result<()> {
    let mut out = String::from("threshold,fraction\n");
    for (threshold, fraction) in ced {
        writeln!(&mut out, "{threshold:.3},{fraction}")?;
    }
    write_atomic(path, out.as_bytes())?;
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> anyhow::Result<()> {
    let model = load_model(&args.model)?;
    let dataset = load_data_dir(&args.data)?;
    let eval = resolve_eval(args.eval_config.as_deref(), &dataset)?;
    let summary = evaluate_model(&model, dataset.samples(), &eval)?;

    if let Some(path) = &args.errors_out {
        let mut out = String::from("id,nme\n");
        for (id, err) in &summary.per_sample {
            writeln!(&mut out, "{id},{err}")?;
        }
        write_atomic(path, out.as_bytes())?;
    }
    if let Some(path) = &args.ced_out {
        write_ced_csv(path, &summary.ced)?;
    }
    if !summary.excluded.is_empty() {
        log::warn!(
            "excluded {} samples with degenerate inter-pupil distance: {}",
            summary.excluded.len(),
            summary.excluded.join(", ")
        );
    }
    println!(
        "mean NME: {:.2}% over {} images ({} excluded)",
        summary.mean_nme * 100.0,
        summary.per_sample.len(),
        summary.excluded.len()
    );
    Ok(())
}

fn cmd_experiment(args: ExperimentArgs) -> anyhow::Result<()> {
    if args.batches == 0 {
        bail!("--batches must be at least 1");
    }
    let train = load_data_dir(&args.data)?;
    let test = load_data_dir(&args.test_data)?;
    let eval = resolve_eval(args.eval_config.as_deref(), &test)?;
    let cfg = train_config_from(
        args.stages,
        args.hidden_nodes,
        args.ridge,
        args.seed,
        args.perturbations,
    );
    let steps = run_incremental_experiment(
        train.samples(),
        test.samples(),
        &eval,
        &cfg,
        args.batches,
        args.seed,
    )?;

    fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("creating {}", args.out_dir.display()))?;
    let mut summary = String::from("batch_pct,mean_nme,update_millis\n");
    for step in &steps {
        writeln!(
            &mut summary,
            "{},{},{}",
            step.batch_pct, step.mean_nme, step.update_millis
        )?;
        write_ced_csv(
            &args.out_dir.join(format!("ced_{:03}.csv", step.batch_pct)),
            &step.ced,
        )?;
        println!(
            "batch {}/{} ({:>3}% of data, {} images): mean NME {:.2}% (update {} ms)",
            step.batch,
            args.batches,
            step.batch_pct,
            step.images_seen,
            step.mean_nme * 100.0,
            step.update_millis
        );
    }
    write_atomic(&args.out_dir.join("summary.csv"), summary.as_bytes())?;
    println!("experiment results in {}", args.out_dir.display());
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> anyhow::Result<()> {
    let dataset = generate_synthetic(args.samples, args.landmarks, args.noise, args.seed)?;
    write_dataset(&dataset, &args.out)?;
    println!(
        "wrote {} synthetic images ({} landmarks each) to {}",
        dataset.samples().len(),
        dataset.landmarks(),
        args.out.display()
    );
    Ok(())
}

/// Applies `ICR_THREADS` (0 or unset = automatic) to the global worker pool.
pub fn init_threads() -> anyhow::Result<()> {
    let Ok(value) = std::env::var("ICR_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .with_context(|| format!("ICR_THREADS must be a non-negative integer (got '{value}')"))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    Ok(())
}
