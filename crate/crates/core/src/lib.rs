//! Event-driven simulation of soft, time-dependent Lorentz gases, pulsed and
//! kicked rotors, with the estimators needed to extract their energy-growth
//! and displacement scaling laws.

pub mod dynamics;
pub mod error;
pub mod lattice;
pub mod quadrature;
pub mod randomwalk;
pub mod scattering;
pub mod stats;
pub mod vec2;

pub use error::{Error, Result};
