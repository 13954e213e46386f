//! Fast incremental model updates from new annotated images.
//!
//! Because every stage regressor carries its Gram matrix and every stage its
//! shape-increment statistics, absorbing a batch of new images never replays
//! the cascade: each stage independently draws one increment per new image
//! from its frozen Gaussian, extracts features at `truth + increment`, and
//! folds the rows into its least-squares state. Hidden layers and statistics
//! are never modified, so update cost is independent of how much data the
//! model has already seen.

use nalgebra::DVector;
use rayon::prelude::*;
use std::time::Instant;

use crate::cascade::{
    feature_matrix, sample_perturbations, target_matrix, CascadeModel, StageRegressor,
};
use crate::dataset::AlignmentSample;
use crate::error::{Error, Result};
use crate::features::{DescriptorFeatures, FeatureSource};
use crate::seeds::{stage_seed, SeedPurpose};

/// What one stage absorbed during an update, with wall-clock timings.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageUpdate {
    pub stage: usize,
    /// Training rows folded in (one per new image).
    pub rows: usize,
    /// Milliseconds spent extracting features for the new rows.
    pub feature_millis: u64,
    /// Milliseconds spent on the least-squares update itself.
    pub update_millis: u64,
}

/// Per-stage accounting for one [`update_model`] call.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct UpdateReport {
    pub stages: Vec<StageUpdate>,
}

impl UpdateReport {
    pub fn total_rows(&self) -> usize {
        self.stages.iter().map(|s| s.rows).sum()
    }

    pub fn total_millis(&self) -> u64 {
        self.stages
            .iter()
            .map(|s| s.feature_millis + s.update_millis)
            .sum()
    }
}

/// Absorbs a batch of new annotated images into a trained model and returns
/// the updated model plus a report. The input model is untouched, so callers
/// can swap the result in atomically. An empty batch returns a clone of the
/// model with zero-row stage entries in the report.
pub fn update_model(
    model: &CascadeModel,
    new_samples: &[AlignmentSample],
    seed: u64,
) -> Result<(CascadeModel, UpdateReport)> {
    update_model_with(
        model,
        new_samples,
        seed,
        &DescriptorFeatures::new(*model.descriptor()),
    )
}

pub fn update_model_with(
    model: &CascadeModel,
    new_samples: &[AlignmentSample],
    seed: u64,
    features: &dyn FeatureSource,
) -> Result<(CascadeModel, UpdateReport)> {
    if model.stages().is_empty() {
        return Err(Error::InvalidArgument(
            "model has no stages to update".into(),
        ));
    }
    let landmarks = model.landmarks();
    for s in new_samples {
        if s.truth.landmarks() != landmarks {
            return Err(Error::DimensionMismatch(format!(
                "sample '{}' has {} landmarks, model expects {landmarks}",
                s.id,
                s.truth.landmarks()
            )));
        }
    }
    if new_samples.is_empty() {
        let report = UpdateReport {
            stages: model
                .stages()
                .iter()
                .map(|s| StageUpdate {
                    stage: s.stage_index,
                    rows: 0,
                    feature_millis: 0,
                    update_millis: 0,
                })
                .collect(),
        };
        return Ok((model.clone(), report));
    }
    let feature_dim = model
        .feature_dimension()
        .expect("non-empty stage list has a feature dimension");
    if features.dimension(landmarks) != feature_dim {
        return Err(Error::DimensionMismatch(format!(
            "feature source produces {} values, model expects {feature_dim}",
            features.dimension(landmarks)
        )));
    }

    let results: Vec<(StageRegressor, StageUpdate)> = model
        .stages()
        .par_iter()
        .map(|stage| update_stage(model, stage, new_samples, seed, features, feature_dim))
        .collect::<Result<_>>()?;

    let (stages, entries): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let updated = model.with_stages(stages)?;
    Ok((updated, UpdateReport { stages: entries }))
}

fn update_stage(
    model: &CascadeModel,
    stage: &StageRegressor,
    new_samples: &[AlignmentSample],
    seed: u64,
    features: &dyn FeatureSource,
    feature_dim: usize,
) -> Result<(StageRegressor, StageUpdate)> {
    let t = stage.stage_index;
    let draws = sample_perturbations(
        &model.stats()[t],
        new_samples.len(),
        stage_seed(seed, SeedPurpose::UpdatePerturbation, t),
    );
    let shapes: Vec<DVector<f64>> = draws
        .iter()
        .zip(new_samples)
        .map(|(d, s)| s.truth.coords() + d)
        .collect();

    let feature_start = Instant::now();
    let x = feature_matrix(new_samples, &shapes, features, feature_dim)?;
    let feature_millis = feature_start.elapsed().as_millis() as u64;

    let y = target_matrix(&draws, 2 * model.landmarks());
    let update_start = Instant::now();
    let elm = stage.elm.incremental_update(&x, &y)?;
    let update_millis = update_start.elapsed().as_millis() as u64;

    Ok((
        StageRegressor {
            elm,
            stage_index: t,
        },
        StageUpdate {
            stage: t,
            rows: new_samples.len(),
            feature_millis,
            update_millis,
        },
    ))
}

/// Shuffles items with the seed and splits them into `k` batches whose sizes
/// differ by at most one (larger batches first). Requires `1 <= k <= N`.
pub fn partition_batches<T: Clone>(items: &[T], k: usize, seed: u64) -> Result<Vec<Vec<T>>> {
    if k == 0 || k > items.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot split {} items into {k} batches",
            items.len()
        )));
    }
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut rng);

    let base = items.len() / k;
    let extra = items.len() % k;
    let mut batches = Vec::with_capacity(k);
    let mut cursor = 0;
    for b in 0..k {
        let size = base + usize::from(b < extra);
        let batch = order[cursor..cursor + size]
            .iter()
            .map(|&i| items[i].clone())
            .collect();
        cursor += size;
        batches.push(batch);
    }
    Ok(batches)
}
