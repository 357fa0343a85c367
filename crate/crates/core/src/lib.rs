//! Topology optimization driven by energy-based physics-informed neural
//! solvers whose trainable parameters are reconfigured across cycles, with a
//! finite-element reference solver for verification and baseline runs.

pub mod diff;
pub mod energy;
pub mod error;
pub mod fem;
pub mod mesh;
pub mod net;
pub mod problem;
pub mod regularization;
pub mod sensitivity;
pub mod update;

pub use error::{Error, Result};
