//! Volume-report pretraining: a 3D convolutional volume encoder and a
//! transformer report encoder aligned by a global contrastive loss and a
//! text-informed multi-view alignment loss, plus zero-shot, probe and
//! retrieval evaluation.

pub mod alignment;
pub mod autograd;
pub mod cli;
pub mod dataset;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
