//! The incremental-learning benchmark: train once on the first batch, then
//! absorb the remaining batches with cheap per-stage updates, evaluating on
//! held-out data after every step.

use std::time::Instant;

use icr_core::cascade::{train_parallel, train_sequential, TrainConfig};
use icr_core::dataset::AlignmentSample;
use icr_core::incremental::{partition_batches, update_model};
use icr_core::shape::EvalConfig;
use icr_core::{Error, Result};

use crate::evaluate::evaluate_model;

/// State after one step of the benchmark (one batch absorbed).
#[derive(Clone, Debug)]
pub struct ExperimentStep {
    /// 1-based batch number.
    pub batch: usize,
    /// Percent of the training data seen so far, floored.
    pub batch_pct: usize,
    /// Training images seen so far.
    pub images_seen: usize,
    /// Held-out mean normalized error at this step.
    pub mean_nme: f64,
    /// Held-out CED curve at this step.
    pub ced: Vec<(f64, f64)>,
    /// Wall milliseconds the model update took (0 for the initial training
    /// step, which is not an update).
    pub update_millis: u64,
}

/// Shuffles the training set into `batches` near-equal batches, trains on
/// the first (a sequential pass to estimate per-stage statistics, then the
/// Monte-Carlo parallel fit), and folds in the remaining batches one
/// incremental update at a time. Returns one step per batch.
pub fn run_incremental_experiment(
    train: &[AlignmentSample],
    test: &[AlignmentSample],
    eval: &EvalConfig,
    cfg: &TrainConfig,
    batches: usize,
    seed: u64,
) -> Result<Vec<ExperimentStep>> {
    if batches == 0 {
        return Err(Error::InvalidArgument(
            "the experiment needs at least one batch".into(),
        ));
    }
    let parts = partition_batches(train, batches, seed)?;

    let first = &parts[0];
    log::info!(
        "experiment: initial training on batch 1/{batches} ({} images)",
        first.len()
    );
    let stats_pass = train_sequential(first, cfg)?;
    let mut model = train_parallel(first, stats_pass.stats(), cfg)?;

    let mut steps = Vec::with_capacity(batches);
    let mut images_seen = first.len();
    let summary = evaluate_model(&model, test, eval)?;
    steps.push(ExperimentStep {
        batch: 1,
        batch_pct: 100 * images_seen / train.len(),
        images_seen,
        mean_nme: summary.mean_nme,
        ced: summary.ced,
        update_millis: 0,
    });

    for (i, batch) in parts.iter().enumerate().skip(1) {
        let update_seed = seed.wrapping_add(i as u64);
        let started = Instant::now();
        let (updated, _report) = update_model(&model, batch, update_seed)?;
        let update_millis = started.elapsed().as_millis() as u64;
        model = updated;
        images_seen += batch.len();

        let summary = evaluate_model(&model, test, eval)?;
        log::info!(
            "experiment: batch {}/{batches} absorbed in {update_millis} ms, held-out NME {:.4}",
            i + 1,
            summary.mean_nme
        );
        steps.push(ExperimentStep {
            batch: i + 1,
            batch_pct: 100 * images_seen / train.len(),
            images_seen,
            mean_nme: summary.mean_nme,
            ced: summary.ced,
            update_millis,
        });
    }
    Ok(steps)
}
