//! Domain alignment for query-based detectors: object-aware adversarial
//! alignment of backbone features, sliced-Wasserstein alignment of decoder
//! features, and a small synthetic detector to exercise both.

pub mod assignment;
pub mod error;
pub mod geometry;
pub mod oaa;
pub mod ota;
pub mod params;
pub mod pseudo;
pub mod rng;
pub mod toydet;
pub mod verify;

pub use error::{Error, Result};
