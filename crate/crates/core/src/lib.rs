//! Learning from noisy labels by decoupling representation and classifier.
//!
//! The pipeline has three stages:
//!
//! 1. [`ssrl`]: learn an encoder from unlabeled data with a contrastive
//!    (NT-Xent) objective over augmented view pairs.
//! 2. [`credibility`]: freeze the encoder, fit a classifier on the noisy
//!    labels, score every label with two Gaussian mixtures and split the
//!    training set into a clean-labeled part `L` and an unlabeled part `U`.
//! 3. [`semi`]: retrain encoder and classifier jointly with MixMatch on
//!    `L`/`U`, a class-balanced sampler and the neighbor-graph penalty from
//!    [`graphreg`].
//!
//! [`harness`] wires the stages together and reproduces the decoupling study
//! and the sampler/regularizer ablation on synthetic data; [`io`] holds the
//! on-disk formats.

pub mod credibility;
pub mod data;
pub mod error;
pub mod graphreg;
pub mod harness;
pub mod io;
pub mod numnet;
pub mod semi;
pub mod ssrl;

pub use error::{Error, Result};

pub(crate) mod rng {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub type Rng = ChaCha8Rng;

    pub fn seeded(seed: u64) -> Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }
}

pub use rng::Rng as SeededRng;

/// Deterministic generator used by every randomized routine.
pub fn seeded_rng(seed: u64) -> SeededRng {
    rng::seeded(seed)
}
