//! Transmission-line failure as a first-exit problem of a stochastic
//! port-Hamiltonian grid model.
//!
//! The crate covers the whole chain: case parsing, the energy function and
//! its derivatives, operating points, failure-point optimization, asymptotic
//! exit rates, Langevin validation, pathology diagnostics, kinetic Monte Carlo
//! cascades and power-law severity statistics.

pub mod cascade_stats;
pub mod case_model;
pub mod energy;
pub mod equilibrium;
pub mod error;
pub mod exit_rate;
pub mod failure_point;
pub mod fixtures;
pub mod kmc;
pub mod langevin;
pub mod linalg;
pub mod pathology;

pub use error::{GridError, Result};
