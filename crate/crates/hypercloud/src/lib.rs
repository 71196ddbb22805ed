//! HyperCloud: a hypernetwork autoencoder for 3D point clouds.
//!
//! A permutation-invariant encoder maps a cloud to a Gaussian latent code;
//! a hypernetwork decoder maps the code to the full weight vector of a
//! small target network; the target network carries samples from a uniform
//! unit-ball prior onto the shape. Because the model emits a function
//! rather than a fixed point matrix, one trained checkpoint generates
//! clouds of any size, and feeding it a triangulated sphere yields a mesh
//! directly.
//!
//! Module map:
//! - [`autodiff`]: tape-based reverse-mode differentiation over f64 tensors;
//! - [`geometry`]: priors, icosphere, normalization, `.xyz`/OBJ I/O,
//!   synthetic shape families;
//! - [`setdist`]: Chamfer and exact (Hungarian) Earth Mover's distances
//!   with tape-integrated variants;
//! - [`model`]: encoder, hypernetwork decoder, target network, loss,
//!   Adam training, JSON checkpoints;
//! - [`metrics`]: JSD / MMD / COV / 1-NNA evaluation suite;
//! - [`generation`]: cloud synthesis, mesh extraction, and both
//!   interpolation modes.

pub mod autodiff;
pub mod error;
pub mod generation;
pub mod geometry;
pub mod metrics;
pub mod model;
pub mod setdist;

pub use error::{Error, Result};
