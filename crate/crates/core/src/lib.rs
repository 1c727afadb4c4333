//! Open-vocabulary segmentation over pixel-text cost volumes, with learnable
//! training-time perturbation of the text and visual embeddings.

pub mod checkpoint;
pub mod config;
pub mod costvol;
pub mod data;
pub mod diagnostics;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod plot;
pub mod rng;
pub mod spm;
pub mod train;

pub use error::{Error, Result};
