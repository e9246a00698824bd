//! Structured cross-modal alignment for continual text-to-video retrieval.

pub mod cli;
pub mod config;
pub mod diffmath;
pub mod error;
pub mod encoders;
pub mod etf;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod similarity;
pub mod verify;

pub use error::{Error, Result};
