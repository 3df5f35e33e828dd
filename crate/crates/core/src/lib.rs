//! Recovering per-sample probabilities of unobserved events from observed
//! composite events.
//!
//! The observed event's probability is a known function (product or mixture) of
//! several latent probabilities. Each latent probability is modelled by its own
//! small network ([`nn`]), composed through an [`graph::EventGraph`], and trained
//! with cross-entropy on the observed events, optionally plus a penalty that pulls
//! batch-mean predictions toward known population rates ([`losses`]).
//!
//! Cross-entropy alone pins the latent factors down only up to a constant
//! multiplier; the aggregate penalty fixes that multiplier. [`datagen`] builds
//! synthetic data with known truth to measure exactly that, [`trainer`] runs the
//! training protocols and [`metrics`] scores the results.

pub mod datagen;
mod error;
pub mod graph;
pub mod losses;
mod matrix;
pub mod metrics;
pub mod nn;
pub mod trainer;

pub use error::{Error, Result};
pub use matrix::Matrix;
