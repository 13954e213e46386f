//! Incremental cascaded regression for landmark alignment.
//!
//! A cascade of single-hidden-layer regressors refines a mean-shape
//! initialization toward the true landmark positions, reading gradient
//! orientation histograms at the current landmark estimates between stages.
//! Stage regressors are randomized feed-forward networks whose output
//! weights come from a ridge least-squares solve, so each stage keeps a
//! Gram-matrix summary of everything it has seen and can absorb new
//! annotated images by a cheap rank-k update instead of retraining.
//!
//! The crate provides:
//!
//! - [`elm`]: the stage regressor (random hidden layer, ridge solve,
//!   incremental least-squares updates);
//! - [`shape`]: shapes, face boxes, and the normalized error metrics;
//! - [`features`]: grayscale images and shape-indexed patch descriptors;
//! - [`cascade`]: sequential training, statistics-driven parallel training,
//!   and inference;
//! - [`incremental`]: folding new images into a trained model per stage;
//! - [`dataset`]: annotation/image IO and a self-contained synthetic
//!   benchmark generator;
//! - [`container`]: a lossless binary model format;
//! - [`seeds`]: the seed-derivation scheme that keeps every randomized
//!   component reproducible and order-independent.

pub mod cascade;
pub mod container;
pub mod dataset;
pub mod elm;
pub mod error;
pub mod features;
pub mod incremental;
pub mod seeds;
pub mod shape;

pub use error::{Error, Result};
