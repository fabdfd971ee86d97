//! Partial multi-view representation learning.
//!
//! Every sample owns a latent vector that is optimised directly so that each
//! of its *available* views can be reconstructed from it by a per-view
//! network. Supervised training adds a centroid hinge loss that clusters the
//! latents by class; the unsupervised variant adds per-view discriminators so
//! that generated entries for missing views look like observed ones.

pub mod baselines;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod gan;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod supervised;

pub use error::{Error, Result};
