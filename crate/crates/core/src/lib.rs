//! Hyperbolic cross-modal alignment in the Lorentz model.

pub mod aggregation;
pub mod autodiff;
pub mod check;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod losses;
pub mod manifold;
pub mod model;
pub mod params;
pub mod trainer;

pub use error::{Error, Result};
