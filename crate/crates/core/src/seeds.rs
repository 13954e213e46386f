//! Deterministic seed streams.
//!
//! Every random draw in the library comes from a ChaCha generator seeded
//! through [`stage_seed`]. Stage trainings and stage updates run concurrently,
//! so each stage gets its own stream keyed by (base seed, purpose, stage
//! index); results are then independent of scheduling and worker count.
//!
//! The derivation is public on purpose: tests and external tooling can replay
//! the exact perturbation draws a training or update run used (see
//! [`crate::cascade::sample_perturbations`]).

/// What a derived seed stream is used for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeedPurpose {
    /// Hidden-layer weight/bias initialization for one stage.
    HiddenLayer,
    /// Perturbation draws during parallel training of one stage.
    TrainPerturbation,
    /// Perturbation draws during an incremental update of one stage.
    UpdatePerturbation,
    /// Shuffling before batch partitioning.
    Partition,
}

impl SeedPurpose {
    fn tag(self) -> u64 {
        match self {
            SeedPurpose::HiddenLayer => 1,
            SeedPurpose::TrainPerturbation => 2,
            SeedPurpose::UpdatePerturbation => 3,
            SeedPurpose::Partition => 4,
        }
    }
}

/// Derives the seed for one purpose/stage stream from a base seed.
pub fn stage_seed(base: u64, purpose: SeedPurpose, stage: usize) -> u64 {
    // splitmix64 finalizer over the keyed input; purpose and stage are mixed
    // in with large odd constants so the streams do not collide.
    let mut z = base
        .wrapping_add(purpose.tag().wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add((stage as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
