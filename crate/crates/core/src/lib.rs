//! Stochastic port-Hamiltonian systems in local coordinates.

pub mod calculus;
pub mod dirac;
pub mod drivers;
pub mod energy;
pub mod ensemble;
pub mod error;
pub mod fields;
pub mod integrators;
pub mod models;
pub mod system;

pub use error::{Result, SphsError};
