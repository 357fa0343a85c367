//! Differentiation engine: tape, parameter layout and Adam.

mod adam;
mod params;
mod tape;

pub use adam::{AdamConfig, AdamState};
pub use params::{Group, LayoutBuilder, ParamSet, Subset, TensorSpec};
pub use tape::{Gradients, Tape, Var};
