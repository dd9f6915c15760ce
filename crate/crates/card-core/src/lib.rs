//! Numerical laboratory for the CARD conditional diffusion model.
//!
//! The crate implements the full pipeline at desk scale: seeded 2-D dataset
//! generators, small dense networks with manual backpropagation, the CARD
//! forward/reverse chains with their SDE and probability-flow ODE forms,
//! exact and entropic 2-Wasserstein distances, the Gronwall-factor bound
//! machinery relating score-matching loss to W2, a 1-D Fokker-Planck grid
//! solver, and a local-Taylor score approximator with quadrature oracles.
//!
//! Everything is deterministic given explicit seeds; no global RNG state.

pub mod bounds;
pub mod datasets;
pub mod diffusion;
pub mod error;
pub mod fokker_planck;
pub mod nn;
pub mod rng;
pub mod score_approx;
pub mod transport;

pub use error::{Error, Result};
