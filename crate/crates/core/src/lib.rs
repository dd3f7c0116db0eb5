//! Cross-age reference-based face restoration on a synthetic face world.
//!
//! The crate implements the full loop at desk scale: a procedural face
//! renderer with exact identity/age ground truth, a first-order degradation
//! synthesizer, an identity-conditioned diffusion denoiser with gated
//! structural fusion, training, age-gradient-guided DDIM sampling, trained
//! evaluation oracles, metrics, and a CLI that orchestrates everything.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod degrade;
pub mod denoiser;
pub mod diffusion;
pub mod evaluation;
pub mod guidance;
pub mod identity;
pub mod imageio;
pub mod model;
pub mod synthface;
pub mod vocab;
pub mod error;
pub mod nn;
pub mod tensor;
pub mod training;
pub mod util;

pub use error::{Error, Result};
