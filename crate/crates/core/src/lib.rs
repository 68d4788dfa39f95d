//! Matrix-free Delta-method epistemic uncertainty for L2-regularized dense
//! classifiers.

mod error;

pub mod cli;
pub mod config;
pub mod data;
pub mod delta;
pub mod nn;
pub mod oracle;
pub mod spectral;
pub mod trainer;

pub use error::{Error, Result};
