//! Multi-stream speaker verification with frequency sub-band selection.

pub mod config;
pub mod corpus;
pub mod dsp;
pub mod encoder;
pub mod error;
pub mod exec;
pub mod fusion;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod training;

pub use error::{Error, Result};
pub use exec::Exec;
