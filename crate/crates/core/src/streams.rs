//! Seeded random streams.
//!
//! Every consumer gets a ChaCha8 stream addressed by `(seed, namespace, index)`.
//! ChaCha supports 2^64 independent streams per key, so the namespace sits in
//! the top byte of the stream id and the index (subject, draw block, ...) in
//! the rest. Streams never depend on how many other streams were consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Namespace {
    /// Per-subject draws of random effects and residuals.
    Simulation = 1,
    /// Per-subject covariate generation.
    Covariates = 2,
    /// Monte-Carlo integration points for the likelihood.
    Integration = 3,
    /// Oracle checks; disjoint from everything the main path uses.
    Oracle = 4,
}

pub fn stream(seed: u64, namespace: Namespace, index: u64) -> ChaCha8Rng {
    assert!(index < 1 << 56, "stream index {index} exceeds 56 bits");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((namespace as u64) << 56) | index);
    rng
}
