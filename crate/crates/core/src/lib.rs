pub mod afvpg;
pub mod autograd;
pub mod blob;
pub mod config;
pub mod data_synth;
pub mod detector;
pub mod error;
pub mod evalproto;
pub mod geometry;
pub mod gradcheck;
pub mod kernels;
pub mod nn;
pub mod par;
pub mod params;
pub mod prompt_strategies;
pub mod real;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use real::Real;
