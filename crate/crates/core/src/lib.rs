//! Toy-world simulator for PSO-secure synthetic dataset generation.
//!
//! A labeled Gaussian mixture stands in for a patient population. An analytic
//! mixture denoiser stands in for a trained diffusion model, a cosine
//! threshold on an identity embedding stands in for a re-identification
//! network, and a linear multi-label classifier stands in for the downstream
//! model. On top of these the crate implements the generation pipeline
//! (pseudo-conditional batch sampling, privacy filtering, prediction-aligned
//! selection, guidance fallback) and the evaluation suite (Fréchet distance,
//! retrieval score, downstream AUROC gap, identity-linkage audit, multi-site
//! sharing).
//!
//! Every output is a pure function of its configuration and seed.

pub mod classifier;
pub mod cli;
pub mod error;
pub mod features;
pub mod generator;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod privacy;
pub mod seed;
pub mod world;

pub use error::{Error, Result};
