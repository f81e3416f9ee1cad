//! Instruction-conditioned absorbing-state diffusion over molecular graphs.
//!
//! Text, a source graph and a fixed number of target node slots share one
//! transformer sequence. A denoiser predicts clean node and edge categories
//! from partially masked targets, and a stride-aware reverse process turns
//! a fully masked target into a molecule.

pub mod cli;
pub mod denoiser;
pub mod diffusion;
pub mod metrics;
pub mod molgraph;
pub mod numerics;
pub mod training;
pub mod vocab;
