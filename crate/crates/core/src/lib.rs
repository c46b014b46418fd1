pub mod config;
pub mod diffusion;
pub mod entity_rep;
pub mod error;
pub mod evalkit;
pub mod experiment;
pub mod geometry;
pub mod nn;
pub mod pipeline;
pub mod relation;
pub mod service;
pub mod synth;
pub mod video;

pub use error::{Error, Result};
