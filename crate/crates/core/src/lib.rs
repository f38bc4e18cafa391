//! Residual-matching dataset distillation on a small reverse-mode autodiff
//! engine: models, resampling, recovery loss, distillation pipeline,
//! metrics, student evaluation and run artifacts.

pub mod autodiff;
pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod io;
pub mod metrics;
pub mod model;
pub mod pool;
pub mod recovery;
pub mod resample;
pub mod rng;
pub mod tensor;

pub use autodiff::{BatchStatVars, BnMode, Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Precision, Tensor};
