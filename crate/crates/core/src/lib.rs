//! Quickest change detection with an energy harvesting sensor.
//!
//! A sensor runs a CUSUM test on a Gaussian mean shift but can only take a
//! sample when its battery holds at least the sensing cost `E_s`. The crate
//! covers the whole pipeline:
//!
//! - [`change_model`]: pre/post-change laws and log-likelihood-ratio statistics.
//! - [`harvest`]: harvested-energy distributions (registered by family name)
//!   and the battery recursion.
//! - [`gating`]: interchangeable gate processes (`always-on`, `full-battery`,
//!   `stationary-chain`) selected by name at runtime.
//! - [`detector`]: classic and gated CUSUM recursions, first-passage runs.
//! - [`stationary`]: stationary battery density, the two-state gate chain and
//!   the spectral check of its transform matrix.
//! - [`renewal`]: Monte Carlo estimates of ladder, overshoot and excursion constants.
//! - [`asymptotics`]: closed-form delay and false-alarm predictions.
//! - [`montecarlo`]: parallel, deterministic experiment harness and tail fitting.
//! - [`cli`]: configuration, manifests and the subcommands behind the binary.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod asymptotics;
pub mod change_model;
pub mod cli;
pub mod detector;
pub mod error;
pub mod gating;
pub mod harvest;
pub mod montecarlo;
pub mod renewal;
pub mod rng;
pub mod stationary;
pub mod stats;

pub use error::{Error, Result};
