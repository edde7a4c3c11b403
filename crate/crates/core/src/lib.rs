//! Capsule networks with dynamic routing for text classification.

pub mod ablate;
pub mod config;
pub mod diff;
pub mod error;
pub mod experiment;
pub mod io;
pub mod layers;
pub mod model;
pub mod params;
pub mod routing;
pub mod strength;
pub mod synth;
pub mod text;
pub mod train;

pub use error::{Error, Result};
