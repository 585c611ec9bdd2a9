//! Training image classifiers under mask-based attribution priors.
//!
//! The crate covers the full experimental loop on desk-scale data: synthetic
//! shortcut datasets, covariate-shifted split construction, a small residual
//! backbone with a differentiation contract strong enough for input-gradient
//! penalties, the attribution-prior losses, attribution maps with
//! localization scoring, a seeded trainer, and run aggregation.
//!
//! The `parallel` feature (default) runs batch and per-sample inner loops on
//! rayon; disabling it yields a sequential build with identical outputs.

pub mod attribution;
pub mod datagen;
pub mod error;
pub mod grid;
pub mod kernels;
pub mod losses;
pub mod model;
pub mod par;
pub mod report;
pub mod splits;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod transforms;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::{Scalar, Tensor};
