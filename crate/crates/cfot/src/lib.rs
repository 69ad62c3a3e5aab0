//! Counterfactual inference engine built on continuous-time flow matching with
//! Markovian batch optimal-transport couplings.
//!
//! The crate is organised around a small set of subsystems:
//!
//! - [`dgp`]: synthetic ellipse worlds with an exact counterfactual oracle,
//! - [`nn`]: a dense residual network with reverse-mode differentiation,
//!   AdamW and parameter EMA,
//! - [`field`]: conditional vector-field parameterisations (direct and
//!   energy-based) plus curl diagnostics,
//! - [`coupling`]: prior/data pairing schemes, including exact batch
//!   assignment via shortest augmenting paths,
//! - [`trainer`]: the flow-matching regression loop,
//! - [`inference`]: ODE-based abduction, prediction and counterfactual
//!   composition,
//! - [`evalkit`]: counterfactual error and soundness metrics,
//! - [`closedform`]: exact one-dimensional quantile counterfactuals used as a
//!   test anchor,
//! - [`config`] / [`experiment`]: experiment orchestration behind the CLI.

pub mod closedform;
pub mod config;
pub mod coupling;
pub mod dgp;
pub mod error;
pub mod evalkit;
pub mod experiment;
pub mod field;
pub mod inference;
pub mod nn;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
