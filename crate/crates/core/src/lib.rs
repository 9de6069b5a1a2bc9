//! Magnification-prior contrastive pre-training for multi-magnification
//! histopathology, with the downstream evaluation protocol.

pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod loss;
pub mod magnification;
pub mod model;
pub mod report;
pub mod rng;
pub mod sampler;
pub mod train;
pub mod transforms;

pub use error::{Error, Result};
pub use magnification::MagnificationFactor;
