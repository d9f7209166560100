pub mod baselines;
#[cfg(feature = "cli")]
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod masking;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod scoring;

pub use error::{Error, Result};
