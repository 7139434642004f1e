//! Concept-based models with a complementary neural branch and a learned router.
//!
//! The crate is `no_std` (with `alloc`) so the numerical core can be embedded
//! anywhere; file formats, the CLI and the HTTP service live in the `syncb`
//! companion crate.
//!
//! Layout:
//! - [`nn`]: dense tensors, a reverse-mode tape, parameters and SGD with momentum.
//! - [`data`]: synthetic concept datasets, splits and concept groups.
//! - [`model`]: shared backbone, concept branch (CBM / CEM), neural branch, router.
//! - [`training`]: the four-term joint loss, training-time interventions, ablations.
//! - [`intervention`]: RCI / USI test-time policies, budgets, curves and AUC.
//! - [`metrics`]: accuracies, routing statistics and multi-seed aggregation.
#![cfg_attr(not(feature = "std"), no_std)]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod data;
mod error;
pub mod intervention;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod training;

pub use error::{Error, Result};

/// Seeded generator used everywhere randomness is needed.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Build the crate's RNG from a `u64` seed.
pub fn seeded_rng(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}
