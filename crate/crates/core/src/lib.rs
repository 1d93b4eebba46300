//! Phased consistency distillation of a few-step latent diffusion student.
//!
//! The crate trains a small conditional teacher in a learned latent space,
//! distills it into a phased consistency student with an adversarial head,
//! and measures the result with a toy version of the usual metric suite.
//! See the `examples/` directory for one runnable program per capability.

pub mod artifact;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod nets;
pub mod optim;
pub mod pipeline;
pub mod schedule;
pub mod solver;
pub mod teacher;

pub use error::{Error, Result};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
