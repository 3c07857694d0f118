//! Desk-scale robustness lab for Bayesian convolutional classifiers.
//!
//! The crate trains deterministic and variational (mean-field Gaussian)
//! CNNs on small image datasets, generates adversarial examples under
//! an L-infinity threat model, applies six input corruptions, and runs
//! a repeatable evaluation protocol that reports accuracy tables, mean
//! L-infinity distances and training-time statistics.
//!
//! Start with the runnable programs in `examples/`; each one covers a
//! major capability. The `bayesrobust` binary wraps the same library
//! behind `train` / `attack` / `perturb` / `evaluate` / `report` /
//! `toygen` subcommands.

pub mod attacks;
pub mod data;
pub mod error;
pub mod eval;
pub mod models;
pub mod perturb;
pub mod report;
pub mod tensor;
pub mod variational;

pub use error::{Error, Result};

use rand_chacha::ChaCha12Rng;

/// Deterministic RNG used everywhere in the crate.
pub type Rng = ChaCha12Rng;

/// Derives an independent seeded stream from a master seed and a
/// purpose tag, so parallel consumers never share a stream.
pub fn derive_rng(master: u64, tag: u64) -> Rng {
    use rand::SeedableRng;
    // SplitMix64 finalizer over (master, tag); avalanches both inputs.
    let mut z = master ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    ChaCha12Rng::seed_from_u64(z ^ (z >> 31))
}
