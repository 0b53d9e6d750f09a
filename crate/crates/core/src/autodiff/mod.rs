//! Reverse-mode differentiation and finite-difference oracles.

pub mod fd;
pub mod params;
pub mod tape;

pub use params::{Binder, GradStore, ParamCoord, ParameterStore};
pub use tape::{biased_softmax, Gradients, Mat, Segment, SpectrumLayout, Tape, Var};
