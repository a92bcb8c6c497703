//! Simulation and spectral analysis of Gram-de Finetti random arrays.
//!
//! A Gram-de Finetti array is an infinite random symmetric matrix that is
//! positive semi-definite on every finite minor and invariant in law under
//! simultaneous row/column permutations. This crate simulates finite minors
//! of such arrays from Aldous-Hoover functional models on dyadic grids,
//! decomposes the underlying kernels into Mercer feature maps, recovers the
//! latent point cloud behind a sampled array, and compares empirical latent
//! measures after quotienting by orthogonal symmetry.

pub mod array;
pub mod error;
pub mod grid;
pub mod io;
pub mod measure;
pub mod mercer;
pub mod recovery;
pub mod rng;
pub mod suite;
pub mod stats;

pub use error::{Error, Result};
