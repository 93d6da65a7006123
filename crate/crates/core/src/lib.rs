//! Interval-conditioned audio-visual recognition and detection.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod detection;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod interval;
pub mod io;
pub mod losses;
pub mod model;
pub mod nn;
pub mod synth;
pub mod train;

pub use error::{Result, TimError};
