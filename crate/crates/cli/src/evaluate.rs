//! Model evaluation: per-image normalized errors and the CED curve.

use icr_core::cascade::{apply_cascade, CascadeModel};
use icr_core::dataset::AlignmentSample;
use icr_core::shape::{ced_curve, normalized_mean_error, standard_ced_thresholds, EvalConfig};
use icr_core::{Error, Result};
use rayon::prelude::*;

/// Evaluation results over a dataset.
#[derive(Clone, Debug)]
pub struct EvalSummary {
    /// (sample id, normalized mean error), in dataset order.
    pub per_sample: Vec<(String, f64)>,
    /// Ids skipped because their ground truth has a degenerate (zero)
    /// inter-pupil distance, leaving the metric undefined.
    pub excluded: Vec<String>,
    pub mean_nme: f64,
    /// (threshold, fraction of images at or under it) on the standard grid.
    pub ced: Vec<(f64, f64)>,
}

/// Runs the cascade over every sample and summarizes the errors. Degenerate
/// samples are excluded (and reported); it is an error for every sample to
/// be degenerate.
pub fn evaluate_model(
    model: &CascadeModel,
    samples: &[AlignmentSample],
    eval: &EvalConfig,
) -> Result<EvalSummary> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no samples to evaluate".into()));
    }
    let predictions = samples
        .par_iter()
        .map(|s| apply_cascade(model, &s.image, &s.bbox))
        .collect::<Result<Vec<_>>>()?;

    let mut per_sample = Vec::with_capacity(samples.len());
    let mut excluded = Vec::new();
    for (sample, pred) in samples.iter().zip(&predictions) {
        match normalized_mean_error(pred, &sample.truth, eval) {
            Ok(err) => per_sample.push((sample.id.clone(), err)),
            Err(Error::DegenerateInterPupil) => excluded.push(sample.id.clone()),
            Err(other) => return Err(other),
        }
    }
    if per_sample.is_empty() {
        return Err(Error::InvalidArgument(
            "every sample has a degenerate inter-pupil distance; nothing to evaluate".into(),
        ));
    }
    let errors: Vec<f64> = per_sample.iter().map(|(_, e)| *e).collect();
    let mean_nme = errors.iter().sum::<f64>() / errors.len() as f64;
    let ced = ced_curve(&errors, &standard_ced_thresholds())?;
    Ok(EvalSummary {
        per_sample,
        excluded,
        mean_nme,
        ced,
    })
}
