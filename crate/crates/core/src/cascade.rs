//! Cascade of stage regressors: sequential training, Monte-Carlo parallel
//! training, and inference.
//!
//! A trained cascade refines an initial shape through T stages. Stage t sees
//! appearance features extracted at the current shape estimate and predicts
//! the current overshoot `delta_s = s - s_truth`, which is subtracted:
//!
//! ```text
//! s_t = s_{t-1} - G_t(f(I, s_{t-1}))
//! ```
//!
//! Sequential training computes each stage's inputs by running the previous
//! stages. Parallel training instead summarizes each stage's shape-increment
//! distribution as a Gaussian (estimated during a sequential pass) and trains
//! every stage independently on increments drawn from its own distribution —
//! which also makes cheap incremental updates possible later, since fresh
//! training rows for any stage can be manufactured from (mu, sigma) without
//! replaying the cascade.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::dataset::AlignmentSample;
use crate::elm::{ElmModel, HiddenLayer};
use crate::error::{Error, Result};
use crate::features::{DescriptorConfig, DescriptorFeatures, FeatureSource, GrayImage};
use crate::seeds::{stage_seed, SeedPurpose};
use crate::shape::{mean_shape, place_in_bbox, BoundingBox, EvalConfig, Shape};
use crate::shape::normalized_mean_error;

/// One trained cascade stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StageRegressor {
    pub elm: ElmModel,
    pub stage_index: usize,
}

/// Gaussian summary (mu, sigma) of a stage's shape increments, with the
/// Cholesky factor of the jittered covariance cached for sampling.
#[derive(Clone, Debug, PartialEq)]
pub struct StageStatistics {
    mu: DVector<f64>,
    sigma: DMatrix<f64>,
    chol: DMatrix<f64>,
}

impl StageStatistics {
    /// Builds statistics from a mean and covariance. The covariance must be
    /// symmetric; a small diagonal jitter (relative to its trace) is added
    /// before factorization so degenerate covariances still sample.
    pub fn from_moments(mu: DVector<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        if sigma.nrows() != mu.len() || !sigma.is_square() {
            return Err(Error::DimensionMismatch(format!(
                "mean of length {} with {}x{} covariance",
                mu.len(),
                sigma.nrows(),
                sigma.ncols()
            )));
        }
        if mu.len() == 0 || mu.len() % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "statistics dimension must be even and positive (got {})",
                mu.len()
            )));
        }
        if !mu.iter().all(|v| v.is_finite()) || !sigma.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("stage statistics".into()));
        }
        if sigma != sigma.transpose() {
            return Err(Error::InvalidArgument(
                "covariance is not symmetric".into(),
            ));
        }
        let jitter = (1e-6 * sigma.trace() / mu.len() as f64).max(1e-8);
        let mut jittered = sigma.clone();
        for i in 0..jittered.nrows() {
            jittered[(i, i)] += jitter;
        }
        let chol = Cholesky::new(jittered)
            .ok_or_else(|| {
                Error::InvalidArgument(
                    "covariance is not positive semidefinite even after jitter".into(),
                )
            })?
            .l();
        Ok(StageStatistics { mu, sigma, chol })
    }

    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    /// Lower-triangular factor L with L·L^T = sigma + jitter·I.
    pub fn chol(&self) -> &DMatrix<f64> {
        &self.chol
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Sample mean and unbiased sample covariance of a set of shape increments.
pub fn estimate_stage_statistics(deltas: &[DVector<f64>]) -> Result<StageStatistics> {
    if deltas.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "covariance needs at least 2 increment vectors (got {})",
            deltas.len()
        )));
    }
    let dim = deltas[0].len();
    for d in deltas {
        if d.len() != dim {
            return Err(Error::DimensionMismatch(format!(
                "increment vectors of length {dim} and {}",
                d.len()
            )));
        }
    }
    let n = deltas.len() as f64;
    let mut mu = DVector::zeros(dim);
    for d in deltas {
        mu += d;
    }
    mu /= n;
    let mut sigma = DMatrix::zeros(dim, dim);
    for d in deltas {
        let c = d - &mu;
        // The outer product writes c_i * c_j to both (i,j) and (j,i); the
        // accumulated matrix is symmetric down to the last bit.
        sigma.ger(1.0, &c, &c, 1.0);
    }
    sigma /= n - 1.0;
    StageStatistics::from_moments(mu, sigma)
}

/// Draws `count` vectors from N(mu, sigma + jitter·I) as mu + chol·z with
/// standard-normal z, deterministically in the seed.
pub fn sample_perturbations(stats: &StageStatistics, count: usize, seed: u64) -> Vec<DVector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = stats.dim();
    (0..count)
        .map(|_| {
            let z = DVector::from_fn(dim, |_, _| rng.sample(StandardNormal));
            &stats.mu + &stats.chol * z
        })
        .collect()
}

/// Training hyperparameters.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    /// Number of cascade stages T.
    pub stages: usize,
    /// Hidden nodes K per stage regressor.
    pub hidden_nodes: usize,
    /// Ridge regularization for the stage least-squares solves.
    pub ridge: f64,
    /// Seed for hidden layers and perturbation draws.
    pub seed: u64,
    /// In parallel training, Gaussian draws per image per stage.
    pub perturbations_per_image: usize,
    /// Patch descriptor parameters (recorded in the model).
    pub descriptor: DescriptorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stages: 4,
            hidden_nodes: 500,
            ridge: 1e-3,
            seed: 0,
            perturbations_per_image: 1,
            descriptor: DescriptorConfig::default(),
        }
    }
}

/// A trained cascade: stage regressors, their shape-increment statistics,
/// the reference (mean training) shape used for initialization, and the
/// descriptor parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct CascadeModel {
    stages: Vec<StageRegressor>,
    stats: Vec<StageStatistics>,
    reference_shape: Shape,
    descriptor: DescriptorConfig,
}

impl CascadeModel {
    /// Assembles a model, validating the cross-stage invariants: one
    /// statistics block per stage, and every stage predicting 2L outputs
    /// from the same feature dimension. Zero stages are allowed (the cascade
    /// then returns its initialization).
    pub fn from_parts(
        stages: Vec<StageRegressor>,
        stats: Vec<StageStatistics>,
        reference_shape: Shape,
        descriptor: DescriptorConfig,
    ) -> Result<Self> {
        if stages.len() != stats.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} stages but {} statistics blocks",
                stages.len(),
                stats.len()
            )));
        }
        let dim2l = 2 * reference_shape.landmarks();
        let feature_dim = stages.first().map(|s| s.elm.layer().features());
        for (i, (stage, st)) in stages.iter().zip(&stats).enumerate() {
            if stage.stage_index != i {
                return Err(Error::InvalidArgument(format!(
                    "stage at position {i} has index {}",
                    stage.stage_index
                )));
            }
            if stage.elm.outputs() != dim2l {
                return Err(Error::DimensionMismatch(format!(
                    "stage {i} predicts {} outputs, shapes have dimension {dim2l}",
                    stage.elm.outputs()
                )));
            }
            if st.dim() != dim2l {
                return Err(Error::DimensionMismatch(format!(
                    "stage {i} statistics have dimension {}, shapes have {dim2l}",
                    st.dim()
                )));
            }
            if Some(stage.elm.layer().features()) != feature_dim {
                return Err(Error::DimensionMismatch(format!(
                    "stage {i} expects {} features, stage 0 expects {}",
                    stage.elm.layer().features(),
                    feature_dim.unwrap_or(0)
                )));
            }
        }
        Ok(CascadeModel {
            stages,
            stats,
            reference_shape,
            descriptor,
        })
    }

    pub fn stages(&self) -> &[StageRegressor] {
        &self.stages
    }

    pub fn stats(&self) -> &[StageStatistics] {
        &self.stats
    }

    pub fn reference_shape(&self) -> &Shape {
        &self.reference_shape
    }

    pub fn descriptor(&self) -> &DescriptorConfig {
        &self.descriptor
    }

    pub fn landmarks(&self) -> usize {
        self.reference_shape.landmarks()
    }

    /// Feature dimension the stages expect; None for a stage-less model.
    pub fn feature_dimension(&self) -> Option<usize> {
        self.stages.first().map(|s| s.elm.layer().features())
    }

    /// Replaces the stage regressors (used by the incremental updater; the
    /// statistics, reference shape, and descriptor are preserved).
    pub(crate) fn with_stages(&self, stages: Vec<StageRegressor>) -> Result<Self> {
        CascadeModel::from_parts(
            stages,
            self.stats.clone(),
            self.reference_shape.clone(),
            self.descriptor,
        )
    }
}

fn validate_training_inputs(samples: &[AlignmentSample], cfg: &TrainConfig) -> Result<usize> {
    if samples.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "training needs at least 2 samples (got {}); stage covariance is undefined otherwise",
            samples.len()
        )));
    }
    if cfg.stages == 0 {
        return Err(Error::InvalidArgument("training needs at least 1 stage".into()));
    }
    if cfg.hidden_nodes == 0 {
        return Err(Error::InvalidArgument("training needs at least 1 hidden node".into()));
    }
    if cfg.perturbations_per_image == 0 {
        return Err(Error::InvalidArgument(
            "parallel training needs at least 1 perturbation per image".into(),
        ));
    }
    let landmarks = samples[0].truth.landmarks();
    for s in samples {
        if s.truth.landmarks() != landmarks {
            return Err(Error::DimensionMismatch(format!(
                "sample '{}' has {} landmarks, expected {landmarks}",
                s.id,
                s.truth.landmarks()
            )));
        }
    }
    Ok(landmarks)
}

/// Extracts the feature matrix (one row per shape) for samples at the given
/// shape estimates, in parallel across samples.
pub(crate) fn feature_matrix(
    samples: &[AlignmentSample],
    shapes: &[DVector<f64>],
    features: &dyn FeatureSource,
    feature_dim: usize,
) -> Result<DMatrix<f64>> {
    let rows: Vec<DVector<f64>> = samples
        .par_iter()
        .zip(shapes.par_iter())
        .map(|(sample, coords)| {
            let shape = Shape::from_coords(coords.clone())?;
            let row = features.extract(&sample.image, &shape)?;
            if row.len() != feature_dim {
                return Err(Error::DimensionMismatch(format!(
                    "feature source produced {} values, declared {feature_dim}",
                    row.len()
                )));
            }
            Ok(row)
        })
        .collect::<Result<_>>()?;
    Ok(DMatrix::from_fn(rows.len(), feature_dim, |i, j| rows[i][j]))
}

pub(crate) fn target_matrix(deltas: &[DVector<f64>], dim: usize) -> DMatrix<f64> {
    DMatrix::from_fn(deltas.len(), dim, |i, j| deltas[i][j])
}

/// Trains the cascade stage by stage: each stage fits the shape increments
/// left over by the previous stages, then the training shapes advance
/// through it. Also the source of the per-stage statistics that parallel
/// training and incremental updates consume.
pub fn train_sequential(samples: &[AlignmentSample], cfg: &TrainConfig) -> Result<CascadeModel> {
    train_sequential_with(samples, cfg, &DescriptorFeatures::new(cfg.descriptor))
}

pub fn train_sequential_with(
    samples: &[AlignmentSample],
    cfg: &TrainConfig,
    features: &dyn FeatureSource,
) -> Result<CascadeModel> {
    let landmarks = validate_training_inputs(samples, cfg)?;
    let dim2l = 2 * landmarks;
    let feature_dim = features.dimension(landmarks);

    let truths: Vec<Shape> = samples.iter().map(|s| s.truth.clone()).collect();
    let reference = mean_shape(&truths)?;
    let mut current: Vec<DVector<f64>> = samples
        .iter()
        .map(|s| Ok(place_in_bbox(&reference, &s.bbox)?.into_coords()))
        .collect::<Result<_>>()?;

    let mut stages = Vec::with_capacity(cfg.stages);
    let mut stats = Vec::with_capacity(cfg.stages);
    for t in 0..cfg.stages {
        let deltas: Vec<DVector<f64>> = current
            .iter()
            .zip(samples)
            .map(|(cur, s)| cur - s.truth.coords())
            .collect();
        let mean_residual =
            deltas.iter().map(|d| d.norm()).sum::<f64>() / deltas.len() as f64;
        log::info!("stage {t}: mean shape increment {mean_residual:.4} px");

        stats.push(estimate_stage_statistics(&deltas)?);
        let x = feature_matrix(samples, &current, features, feature_dim)?;
        let y = target_matrix(&deltas, dim2l);
        let layer = HiddenLayer::random(
            feature_dim,
            cfg.hidden_nodes,
            stage_seed(cfg.seed, SeedPurpose::HiddenLayer, t),
        )?;
        let elm = ElmModel::batch_train(&layer, &x, &y, cfg.ridge)?;

        let pred = elm.predict(&x)?;
        for (i, cur) in current.iter_mut().enumerate() {
            *cur -= pred.row(i).transpose();
        }
        stages.push(StageRegressor {
            elm,
            stage_index: t,
        });
    }

    CascadeModel::from_parts(stages, stats, reference, cfg.descriptor)
}

/// Trains one stage from its statistics alone: increments are drawn from
/// the stage's Gaussian, shapes are set to truth + increment, and the
/// regressor fits increment from the features there.
fn train_stage_from_statistics(
    samples: &[AlignmentSample],
    stats: &StageStatistics,
    cfg: &TrainConfig,
    stage_index: usize,
    features: &dyn FeatureSource,
    feature_dim: usize,
    dim2l: usize,
) -> Result<StageRegressor> {
    let per_image = cfg.perturbations_per_image;
    let draws = sample_perturbations(
        stats,
        samples.len() * per_image,
        stage_seed(cfg.seed, SeedPurpose::TrainPerturbation, stage_index),
    );
    let shapes: Vec<DVector<f64>> = draws
        .iter()
        .enumerate()
        .map(|(row, d)| samples[row / per_image].truth.coords() + d)
        .collect();
    let row_samples: Vec<AlignmentSample> = if per_image == 1 {
        samples.to_vec()
    } else {
        // Repeat each sample once per draw so rows and images stay aligned.
        shapes
            .iter()
            .enumerate()
            .map(|(row, _)| samples[row / per_image].clone())
            .collect()
    };
    let x = feature_matrix(&row_samples, &shapes, features, feature_dim)?;
    let y = target_matrix(&draws, dim2l);
    let layer = HiddenLayer::random(
        feature_dim,
        cfg.hidden_nodes,
        stage_seed(cfg.seed, SeedPurpose::HiddenLayer, stage_index),
    )?;
    let elm = ElmModel::batch_train(&layer, &x, &y, cfg.ridge)?;
    Ok(StageRegressor {
        elm,
        stage_index,
    })
}

/// Trains all stages independently from per-stage statistics (usually
/// estimated by a prior sequential pass). Stages train concurrently; the
/// result is deterministic in the seed regardless of execution order,
/// because every stage derives its own draw stream.
pub fn train_parallel(
    samples: &[AlignmentSample],
    stats: &[StageStatistics],
    cfg: &TrainConfig,
) -> Result<CascadeModel> {
    train_parallel_with(samples, stats, cfg, &DescriptorFeatures::new(cfg.descriptor))
}

pub fn train_parallel_with(
    samples: &[AlignmentSample],
    stats: &[StageStatistics],
    cfg: &TrainConfig,
    features: &dyn FeatureSource,
) -> Result<CascadeModel> {
    let landmarks = validate_training_inputs(samples, cfg)?;
    let dim2l = 2 * landmarks;
    if stats.len() != cfg.stages {
        return Err(Error::DimensionMismatch(format!(
            "{} statistics blocks for {} stages",
            stats.len(),
            cfg.stages
        )));
    }
    for (t, st) in stats.iter().enumerate() {
        if st.dim() != dim2l {
            return Err(Error::DimensionMismatch(format!(
                "stage {t} statistics have dimension {}, shapes have {dim2l}",
                st.dim()
            )));
        }
    }
    let feature_dim = features.dimension(landmarks);
    let truths: Vec<Shape> = samples.iter().map(|s| s.truth.clone()).collect();
    let reference = mean_shape(&truths)?;

    let stages: Vec<StageRegressor> = (0..cfg.stages)
        .into_par_iter()
        .map(|t| {
            train_stage_from_statistics(samples, &stats[t], cfg, t, features, feature_dim, dim2l)
        })
        .collect::<Result<_>>()?;

    CascadeModel::from_parts(stages, stats.to_vec(), reference, cfg.descriptor)
}

/// Runs the cascade on one face box and returns the final shape.
pub fn apply_cascade(model: &CascadeModel, img: &GrayImage, bbox: &BoundingBox) -> Result<Shape> {
    apply_cascade_with(model, img, bbox, &DescriptorFeatures::new(*model.descriptor()))
}

pub fn apply_cascade_with(
    model: &CascadeModel,
    img: &GrayImage,
    bbox: &BoundingBox,
    features: &dyn FeatureSource,
) -> Result<Shape> {
    let mut s = place_in_bbox(model.reference_shape(), bbox)?.into_coords();
    for stage in model.stages() {
        let shape = Shape::from_coords(s.clone())?;
        let f = features.extract(img, &shape)?;
        s -= stage.elm.predict_row(&f)?;
    }
    Shape::from_coords(s)
}

/// Like [`apply_cascade`], but returns the whole refinement trajectory
/// `[s_0, s_1, ..., s_T]`.
pub fn apply_cascade_trace_with(
    model: &CascadeModel,
    img: &GrayImage,
    bbox: &BoundingBox,
    features: &dyn FeatureSource,
) -> Result<Vec<Shape>> {
    let mut s = place_in_bbox(model.reference_shape(), bbox)?.into_coords();
    let mut trace = Vec::with_capacity(model.stages().len() + 1);
    trace.push(Shape::from_coords(s.clone())?);
    for stage in model.stages() {
        let shape = Shape::from_coords(s.clone())?;
        let f = features.extract(img, &shape)?;
        s -= stage.elm.predict_row(&f)?;
        trace.push(Shape::from_coords(s.clone())?);
    }
    Ok(trace)
}

/// Mean normalized error over samples after each cascade stage (T+1 values,
/// the first for the initialization). Samples evaluate in parallel; the
/// averaging order is fixed, so results are deterministic.
pub fn mean_nme_per_stage(
    model: &CascadeModel,
    samples: &[AlignmentSample],
    eval: &EvalConfig,
    features: &dyn FeatureSource,
) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no samples to evaluate".into()));
    }
    let per_sample: Vec<Vec<f64>> = samples
        .par_iter()
        .map(|sample| {
            let trace = apply_cascade_trace_with(model, &sample.image, &sample.bbox, features)?;
            trace
                .iter()
                .map(|s| normalized_mean_error(s, &sample.truth, eval))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    let mut curve = vec![0.0; model.stages().len() + 1];
    for errors in &per_sample {
        for (acc, e) in curve.iter_mut().zip(errors) {
            *acc += e;
        }
    }
    for v in &mut curve {
        *v /= samples.len() as f64;
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::generate_synthetic;
    use crate::features::ProbeFeatures;
    use approx::assert_relative_eq;
    use rand::Rng;

    #[test]
    fn statistics_of_opposite_vectors_have_zero_mean() {
        let v = DVector::from_vec(vec![1.0, -2.0, 3.0, 0.5]);
        let stats = estimate_stage_statistics(&[v.clone(), -v]).unwrap();
        assert!(stats.mu().iter().all(|&m| m == 0.0));
    }

    #[test]
    fn identical_deltas_give_zero_covariance_but_sampling_still_works() {
        let v = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        let stats = estimate_stage_statistics(&[v.clone(), v.clone(), v.clone()]).unwrap();
        assert!(stats.sigma().iter().all(|&s| s == 0.0));
        // Jitter floor is 1e-8, so draws stay within 6*sqrt(1e-8) of mu.
        for draw in sample_perturbations(&stats, 50, 7) {
            assert!((draw - stats.mu()).amax() <= 6.0 * 1e-4);
        }
    }

    #[test]
    fn statistics_match_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let deltas: Vec<DVector<f64>> = (0..100)
            .map(|_| DVector::from_fn(6, |_, _| rng.random_range(-2.0..2.0)))
            .collect();
        let stats = estimate_stage_statistics(&deltas).unwrap();

        // Naive two-pass mean/covariance, scalar loops only.
        let n = deltas.len();
        let mut mean = vec![0.0; 6];
        for d in &deltas {
            for i in 0..6 {
                mean[i] += d[i] / n as f64;
            }
        }
        for i in 0..6 {
            assert_relative_eq!(stats.mu()[i], mean[i], epsilon = 1e-10);
            for j in 0..6 {
                let mut cov = 0.0;
                for d in &deltas {
                    cov += (d[i] - mean[i]) * (d[j] - mean[j]);
                }
                cov /= (n - 1) as f64;
                assert_relative_eq!(stats.sigma()[(i, j)], cov, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn statistics_require_two_vectors() {
        let v = DVector::from_vec(vec![1.0, 2.0]);
        assert!(estimate_stage_statistics(&[v]).is_err());
        assert!(estimate_stage_statistics(&[]).is_err());
    }

    #[test]
    fn covariance_factor_reproduces_jittered_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let deltas: Vec<DVector<f64>> = (0..40)
            .map(|_| DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0)))
            .collect();
        let stats = estimate_stage_statistics(&deltas).unwrap();
        let rebuilt = stats.chol() * stats.chol().transpose();
        let jitter = (1e-6 * stats.sigma().trace() / 4.0).max(1e-8);
        let mut expected = stats.sigma().clone();
        for i in 0..4 {
            expected[(i, i)] += jitter;
        }
        assert!((rebuilt - expected).amax() < 1e-8);
    }

    #[test]
    fn empty_draw_is_empty() {
        let stats = StageStatistics::from_moments(
            DVector::zeros(4),
            DMatrix::identity(4, 4),
        )
        .unwrap();
        assert!(sample_perturbations(&stats, 0, 1).is_empty());
    }

    #[test]
    fn draws_are_deterministic_in_seed() {
        let stats = StageStatistics::from_moments(
            DVector::from_vec(vec![1.0, -1.0, 0.5, 2.0]),
            DMatrix::identity(4, 4) * 0.25,
        )
        .unwrap();
        assert_eq!(
            sample_perturbations(&stats, 10, 5),
            sample_perturbations(&stats, 10, 5)
        );
        assert_ne!(
            sample_perturbations(&stats, 10, 5),
            sample_perturbations(&stats, 10, 6)
        );
    }

    #[test]
    fn standard_gaussian_draws_match_moments() {
        let stats = StageStatistics::from_moments(
            DVector::zeros(4),
            DMatrix::identity(4, 4),
        )
        .unwrap();
        let draws = sample_perturbations(&stats, 10_000, 1234);
        let est = estimate_stage_statistics(&draws).unwrap();
        for i in 0..4 {
            assert!(est.mu()[i].abs() < 0.05, "mean {}", est.mu()[i]);
            assert!((est.sigma()[(i, i)] - 1.0).abs() < 0.1);
        }
    }

    #[test]
    fn estimated_mu_recovers_within_three_standard_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a = DMatrix::from_fn(4, 4, |_, _| rng.random_range(-1.0..1.0));
        let sigma = &a * a.transpose() + DMatrix::identity(4, 4);
        let mu = DVector::from_vec(vec![3.0, -2.0, 0.0, 1.5]);
        let stats = StageStatistics::from_moments(mu.clone(), sigma.clone()).unwrap();

        let n = 50_000;
        let draws = sample_perturbations(&stats, n, 99);
        let est = estimate_stage_statistics(&draws).unwrap();
        for i in 0..4 {
            let standard_error = (sigma[(i, i)] / n as f64).sqrt();
            assert!(
                (est.mu()[i] - mu[i]).abs() <= 3.0 * standard_error,
                "coordinate {i}: {} vs {}",
                est.mu()[i],
                mu[i]
            );
        }
    }

    fn probe_source() -> ProbeFeatures {
        ProbeFeatures::with_radius(6.0)
    }

    #[test]
    fn initialization_at_truth_gives_zero_first_stage_mean() {
        // All samples identical, box = tight truth box: the placed reference
        // equals the truth exactly, so all first-stage increments are zero.
        let ds = generate_synthetic(2, 5, 0.0, 31).unwrap();
        let one = ds.samples()[0].clone();
        let samples = vec![one.clone(), one.clone(), one];
        let cfg = TrainConfig {
            stages: 1,
            hidden_nodes: 8,
            ridge: 1e-3,
            seed: 4,
            ..TrainConfig::default()
        };
        let model = train_sequential_with(&samples, &cfg, &probe_source()).unwrap();
        assert!(model.stats()[0].mu().iter().all(|&v| v == 0.0));
        assert!(model.stats()[0].sigma().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_stage_interpolates_when_rows_equal_nodes() {
        // N = K and ridge = 0: the hidden matrix is square and generically
        // invertible, so the stage reproduces its training increments and
        // one stage lands on the ground truth to solver precision.
        let ds = generate_synthetic(20, 5, 0.0, 8).unwrap();
        let cfg = TrainConfig {
            stages: 1,
            hidden_nodes: 20,
            ridge: 0.0,
            seed: 11,
            ..TrainConfig::default()
        };
        let source = probe_source();
        let model = train_sequential_with(ds.samples(), &cfg, &source).unwrap();
        let eval = ds.eval_config().unwrap();
        let curve = mean_nme_per_stage(model_ref(&model), ds.samples(), &eval, &source).unwrap();
        assert!(curve[0] > 1e-3, "initialization should not be exact");
        assert!(curve[1] <= 1e-6, "training NME after one stage: {}", curve[1]);
    }

    // Identity helper so the test above reads naturally.
    fn model_ref(model: &CascadeModel) -> &CascadeModel {
        model
    }

    #[test]
    fn benchmark_scale_dimensions_check_out() {
        // 29 landmarks, 4 stages, 500 hidden nodes: stage weights are 500x58.
        let ds = generate_synthetic(12, 29, 0.01, 13).unwrap();
        let cfg = TrainConfig {
            stages: 4,
            hidden_nodes: 500,
            ridge: 1e-3,
            seed: 2,
            ..TrainConfig::default()
        };
        let source = probe_source();
        let model = train_sequential_with(ds.samples(), &cfg, &source).unwrap();
        assert_eq!(model.stages().len(), 4);
        for stage in model.stages() {
            assert_eq!(
                (stage.elm.beta().nrows(), stage.elm.beta().ncols()),
                (500, 58)
            );
        }
    }

    #[test]
    fn parallel_training_is_independent_of_stage_order() {
        let ds = generate_synthetic(12, 4, 0.01, 17).unwrap();
        let cfg = TrainConfig {
            stages: 3,
            hidden_nodes: 16,
            ridge: 1e-3,
            seed: 23,
            ..TrainConfig::default()
        };
        let source = probe_source();
        let seq = train_sequential_with(ds.samples(), &cfg, &source).unwrap();
        let par = train_parallel_with(ds.samples(), seq.stats(), &cfg, &source).unwrap();

        // Rebuild every stage by hand in reverse order; bitwise-equal stages
        // prove order independence.
        let feature_dim = source.dimension(4);
        for t in (0..3).rev() {
            let stage = train_stage_from_statistics(
                ds.samples(),
                &seq.stats()[t],
                &cfg,
                t,
                &source,
                feature_dim,
                8,
            )
            .unwrap();
            assert_eq!(&stage, &par.stages()[t]);
        }
    }

    #[test]
    fn parallel_row_counts_follow_perturbations_per_image() {
        let ds = generate_synthetic(10, 4, 0.01, 19).unwrap();
        let mut cfg = TrainConfig {
            stages: 2,
            hidden_nodes: 12,
            ridge: 1e-3,
            seed: 3,
            ..TrainConfig::default()
        };
        let source = probe_source();
        let seq = train_sequential_with(ds.samples(), &cfg, &source).unwrap();
        let par = train_parallel_with(ds.samples(), seq.stats(), &cfg, &source).unwrap();
        for stage in par.stages() {
            assert_eq!(stage.elm.samples_seen(), 10);
        }
        cfg.perturbations_per_image = 3;
        let par3 = train_parallel_with(ds.samples(), seq.stats(), &cfg, &source).unwrap();
        for stage in par3.stages() {
            assert_eq!(stage.elm.samples_seen(), 30);
        }
    }

    #[test]
    fn parallel_requires_matching_statistics_count() {
        let ds = generate_synthetic(8, 4, 0.01, 29).unwrap();
        let cfg = TrainConfig {
            stages: 2,
            hidden_nodes: 8,
            ridge: 1e-3,
            seed: 3,
            ..TrainConfig::default()
        };
        let source = probe_source();
        let seq = train_sequential_with(ds.samples(), &cfg, &source).unwrap();
        let err = train_parallel_with(ds.samples(), &seq.stats()[..1], &cfg, &source);
        assert!(err.is_err());
    }

    #[test]
    fn training_requires_two_samples() {
        let ds = generate_synthetic(2, 4, 0.0, 1).unwrap();
        let cfg = TrainConfig {
            stages: 1,
            hidden_nodes: 4,
            ..TrainConfig::default()
        };
        assert!(train_sequential_with(&ds.samples()[..1], &cfg, &probe_source()).is_err());
        assert!(train_sequential_with(ds.samples(), &cfg, &probe_source()).is_ok());
    }

    #[test]
    fn empty_cascade_returns_initialization() {
        let ds = generate_synthetic(3, 5, 0.0, 5).unwrap();
        let sample = &ds.samples()[0];
        let truths: Vec<Shape> = ds.samples().iter().map(|s| s.truth.clone()).collect();
        let reference = mean_shape(&truths).unwrap();
        let model = CascadeModel::from_parts(
            vec![],
            vec![],
            reference.clone(),
            DescriptorConfig::default(),
        )
        .unwrap();
        let out = apply_cascade(&model, &sample.image, &sample.bbox).unwrap();
        let expected = place_in_bbox(&reference, &sample.bbox).unwrap();
        assert_eq!(out, expected);
    }

    #[test]
    fn zero_weight_stages_leave_initialization_unchanged() {
        let ds = generate_synthetic(6, 5, 0.0, 6).unwrap();
        let cfg = TrainConfig {
            stages: 2,
            hidden_nodes: 8,
            ridge: 1e-3,
            seed: 7,
            ..TrainConfig::default()
        };
        let source = probe_source();
        let trained = train_sequential_with(ds.samples(), &cfg, &source).unwrap();
        let zeroed: Vec<StageRegressor> = trained
            .stages()
            .iter()
            .map(|s| StageRegressor {
                elm: ElmModel::from_parts(
                    s.elm.layer().clone(),
                    DMatrix::zeros(s.elm.beta().nrows(), s.elm.beta().ncols()),
                    DMatrix::identity(s.elm.kmat().nrows(), s.elm.kmat().ncols()),
                    1.0,
                    0,
                )
                .unwrap(),
                stage_index: s.stage_index,
            })
            .collect();
        let model = trained.with_stages(zeroed).unwrap();

        let sample = &ds.samples()[0];
        let out = apply_cascade_with(&model, &sample.image, &sample.bbox, &source).unwrap();
        let expected = place_in_bbox(model.reference_shape(), &sample.bbox).unwrap();
        assert_eq!(out, expected);
    }

    #[test]
    fn trace_is_consistent_with_apply() {
        let ds = generate_synthetic(8, 5, 0.01, 41).unwrap();
        let cfg = TrainConfig {
            stages: 3,
            hidden_nodes: 12,
            ridge: 1e-3,
            seed: 9,
            ..TrainConfig::default()
        };
        let source = probe_source();
        let model = train_sequential_with(ds.samples(), &cfg, &source).unwrap();
        let sample = &ds.samples()[2];
        let trace =
            apply_cascade_trace_with(&model, &sample.image, &sample.bbox, &source).unwrap();
        let out = apply_cascade_with(&model, &sample.image, &sample.bbox, &source).unwrap();
        assert_eq!(trace.len(), 4);
        assert_eq!(trace.last().unwrap(), &out);
    }

    #[test]
    fn model_from_parts_validates_cross_stage_invariants() {
        let ds = generate_synthetic(6, 4, 0.0, 2).unwrap();
        let cfg = TrainConfig {
            stages: 2,
            hidden_nodes: 8,
            ridge: 1e-3,
            seed: 1,
            ..TrainConfig::default()
        };
        let source = probe_source();
        let model = train_sequential_with(ds.samples(), &cfg, &source).unwrap();

        // Statistics count mismatch.
        assert!(CascadeModel::from_parts(
            model.stages().to_vec(),
            model.stats()[..1].to_vec(),
            model.reference_shape().clone(),
            *model.descriptor(),
        )
        .is_err());

        // Wrong stage indices.
        let mut swapped = model.stages().to_vec();
        swapped[0].stage_index = 1;
        swapped[1].stage_index = 0;
        assert!(CascadeModel::from_parts(
            swapped,
            model.stats().to_vec(),
            model.reference_shape().clone(),
            *model.descriptor(),
        )
        .is_err());

        // Reference shape with the wrong landmark count.
        assert!(CascadeModel::from_parts(
            model.stages().to_vec(),
            model.stats().to_vec(),
            Shape::from_points(&[(0.0, 0.0), (1.0, 1.0)]).unwrap(),
            *model.descriptor(),
        )
        .is_err());
    }
}
