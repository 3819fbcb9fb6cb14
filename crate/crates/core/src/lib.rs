//! Temporal knowledge graph extrapolation.
//!
//! The crate is organised bottom-up:
//!
//! - [`data`]: quadruple files, snapshot graphs, history windows, synthetic data
//! - [`autodiff`]: dense tensors and a reverse-mode tape
//! - [`encoder`], [`disentangle`], [`decoder`]: the model components
//! - [`model`]: parameters and the full window forward pass
//! - [`training`]: losses, Adam, the epoch loop and checkpoints
//! - [`eval`]: time-aware filtered ranking metrics

pub mod autodiff;
mod error;

pub use error::{Result, TkgError};
pub mod data;
pub mod decoder;
pub mod disentangle;
pub mod encoder;
pub mod eval;
pub mod gradsuite;
pub mod model;
pub mod params;
pub mod training;

#[cfg(test)]
mod testutil;
