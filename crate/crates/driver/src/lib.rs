//! Optimization driver for energy-trained neural-field topology optimization:
//! problem library, run configuration, the outer loop and output writers.

pub mod config;
pub mod error;
pub mod library;
pub mod optimize;
pub mod output;
pub mod verify;
