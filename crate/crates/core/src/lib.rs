pub mod artifact;
pub mod checkpoint;
pub mod detect;
pub mod embeddings;
pub mod error;
pub mod eval;
pub mod extraction;
pub mod finetune;
pub mod frame;
pub mod manifest;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod synthetic;
pub mod temporal;
pub mod video;

pub use error::{Error, Result};
