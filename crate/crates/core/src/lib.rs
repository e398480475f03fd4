//! Instance-conditional learned reweighting.
//!
//! A weighting network `g(x) ∈ (0, 1)` scales per-example training losses
//! of a classifier or regressor `f`. Its parameters are trained through a
//! one-step unrolled bilevel update so that the reweighted model does well
//! on a held-out set, where the held-out objective adds the Monte-Carlo
//! dropout variance of `f`. At test time `g` doubles as an uncertainty
//! score for selective prediction.
//!
//! Module map:
//! - [`numkit`]: seeded streams, dense matrices, OLS and rank statistics
//! - [`synthgen`]: heteroscedastic regression worlds with covariate shift
//! - [`nets`], [`metanet`]: the predictor and the weighting network
//! - [`mcvar`]: dropout variance and the validation meta-loss
//! - [`bilevel`]: the alternating trainer, hypergradients and baselines
//! - [`seleval`]: rejection curves, AUARC, ECE and target-weight fits
//! - [`experiments`]: multi-seed studies
//! - [`cli`]: the `revar` command-line driver and its run manifests

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bilevel;
pub mod cli;
pub mod data;
pub mod error;
pub mod experiments;
pub mod mcvar;
pub mod metanet;
pub mod nets;
pub mod numkit;
pub mod par;
pub mod seleval;
pub mod synthgen;

pub use error::{Result, RevarError};
