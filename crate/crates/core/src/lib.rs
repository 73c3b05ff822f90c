//! Multi-resolution conditional motion synthesis from a few examples.

pub mod conditioning;
pub mod config;
pub mod error;
pub mod io;
pub mod metrics;
pub mod motion;
pub mod networks;
pub mod nn;
pub mod pipeline;
pub mod pyramid;
pub mod seeding;
pub mod synth;
pub mod training;

pub use error::{Error, FormatError, Result};
