//! Simulation and analysis toolkit for variational quantum circuits.
//!
//! The crate is organised around two simulation backends (a dense state
//! vector and a matrix-product state), a circuit representation with symbolic
//! parameter slots, single-qubit noise channels with their inverse maps, and
//! the optimisation and analysis routines built on top of them.

pub mod analysis;
pub mod channels;
pub mod circuits;
pub mod datasets;
pub mod error;
pub mod experiment;
pub mod mps;
pub mod optimize;
pub mod rng;
pub mod statevector;

pub use error::{Result, VqError};

/// Complex scalar used throughout.
pub type C64 = num_complex::Complex64;
