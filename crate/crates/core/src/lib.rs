//! Object-level novelty detection with dense prototype fine-tuning and
//! attention-guided masked knowledge distillation on vision transformers.

pub mod dataset;
pub mod defend;
pub mod encoder;
pub mod error;
pub mod mkd;
pub mod params;
pub mod resample;
pub mod runner;
pub mod scoring;
pub mod splits;

pub use error::{Error, Result};
