pub mod augment;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod decoder;
pub mod distill;
pub mod encoder;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod losses;
pub mod masking;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod probe;
pub mod synthdata;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
