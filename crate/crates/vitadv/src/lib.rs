//! Numerical laboratory for adversarial training of a simplified two-layer
//! softmax-attention classifier on synthetic signal-plus-noise data.
//!
//! The crate provides data generation, the model with analytic gradients,
//! per-token PGD attacks, a full-batch adversarial training loop, trajectory
//! diagnostics, held-out evaluation, and an experiment CLI (phase-diagram
//! sweeps, dynamics runs, SVG heatmaps).

pub mod attack;
pub mod cli;
pub mod config;
pub mod data;
pub mod diag;
pub mod dynamics;
pub mod error;
pub mod eval;
pub mod heatmap;
pub mod model;
pub mod presets;
pub mod rng;
pub mod sweep;
pub mod train;

pub mod testutil;

pub use error::{Error, Result};
