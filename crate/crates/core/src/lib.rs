//! In-context function-fitting laboratory: a task algebra over weighted base
//! functions, a prompt sampler with label-noise and out-of-range
//! perturbations, transformer and MLP regressors with exact gradients, a
//! trainer, and an evaluator producing squared-error reports.

pub mod error;
pub mod evaluator;
pub mod experiment;
pub mod funcspace;
pub mod model;
pub mod rng;
pub mod sampler;
pub mod trainer;

pub use error::{Error, Result};
