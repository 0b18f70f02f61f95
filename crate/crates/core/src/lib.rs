//! Subject-independent, semi-supervised EEG motor-imagery classification with a
//! columnar spatio-temporal auto-encoder (CST-AE).
//!
//! Every numeric component is generic over [`Scalar`] (`f32` for training, `f64` for
//! gradient checks); the aliases below name the common instantiations.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod ingest;
pub mod losses;
pub mod model;
pub mod scalar;
pub mod train;
pub mod windowing;

pub use error::{Error, ParseError, Result};
pub use scalar::Scalar;

pub type Network32 = model::Network<f32>;
pub type Network64 = model::Network<f64>;
pub type Trial32 = data::Trial<f32>;
pub type Trial64 = data::Trial<f64>;
