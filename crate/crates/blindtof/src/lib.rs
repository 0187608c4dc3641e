//! Super-resolved recovery of spike trains from kernel-filtered,
//! uniformly sampled time-of-flight traces.
//!
//! Two recovery routes are provided: a known-kernel route built on
//! exponential reproduction and an annihilating filter ([`prony`]), and a
//! blind route that alternates between a rational spike-model fit and a
//! kernel least-squares update ([`blind_amin`]). [`pipeline`] runs either
//! one over whole image tensors.

pub mod blind_amin;
pub mod error;
pub mod forward_model;
pub mod pipeline;
pub mod prony;
pub mod signal_core;
pub mod strang_fix;

pub use error::{Error, Result};
pub use num_complex::Complex64 as C64;
