//! Command-line harness for incremental cascaded regression.
//!
//! The binary surface lives in [`cli`]; [`commands`] implements it on top of
//! `icr-core`. [`evaluate`] and [`experiment`] are exposed as a library so
//! integration tests (and other tools) can run evaluations and the
//! incremental-learning benchmark in memory.

pub mod cli;
pub mod commands;
pub mod evaluate;
pub mod experiment;
