pub mod dataset;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod generator;
pub mod gradsuite;
pub mod image;
pub mod numerics;
pub mod pipeline;
pub mod quantizer;
pub mod reasoner;
pub mod training;

pub use error::{Error, Result};
