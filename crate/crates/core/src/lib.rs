pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod gating;
pub mod image;
pub mod model;
pub mod modnet;
pub mod objective;
pub mod overlay;
pub mod par;
pub mod rng;
pub mod tensor;
pub mod training;
pub mod trunk;

pub use error::{Error, Result};
