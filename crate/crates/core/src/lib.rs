//! Hierarchical Bayesian unmixing and robust supervised classification of
//! hyperspectral images.
//!
//! Pixels follow a linear mixing model `Y = M A + E` with known endmembers.
//! Abundances are grouped by a Potts-regularized Gaussian mixture (cluster
//! labels `z`), and clusters are tied to classes (labels `omega`) through an
//! interaction matrix `Q`. Expert training labels enter with a confidence
//! `eta`, so corrupted ground truth is tolerated. Everything is estimated with
//! a Gibbs sampler.

pub mod distributions;
pub mod error;
pub mod io;
pub mod lattice;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod sampler;
pub mod synthgen;

pub use error::{Error, Result};
