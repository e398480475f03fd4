//! Deterministic numeric substrate: seeded random streams, a small dense
//! matrix type, and the statistical fits used by the evaluation code.

mod matrix;
mod rng;
mod stats;

pub use matrix::{dot, Matrix};
pub use rng::{gaussian_sample, Rng};
pub use stats::{mean, ols_fit, ranks, spearman, std_dev, OlsFit};
