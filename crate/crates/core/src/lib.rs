//! Open quantum random walks and open quantum Brownian motion.
//!
//! Discrete walks and their trajectories, the continuum trajectory SDEs, Lindblad
//! propagation, finite-dimensional checks of the dilation's Ito algebra, spin-half
//! analytics, and a seeded ensemble harness.

pub mod discrete;
pub mod error;
pub mod harness;
pub mod ito;
pub mod kernel;
pub mod linalg;
pub mod lindblad;
pub mod quad;
pub mod rng;
pub mod scaling;
pub mod sde;
pub mod spin_half;

pub use error::{Error, Result};
