//! Dense feed-forward classifier with analytic derivatives.
//!
//! Everything here works on a flat parameter vector whose layout is fixed by
//! [`NetworkConfig::layout`]: for each layer in order, the weight matrix
//! vectorized row by row, followed by the bias.

mod checkpoint;
mod config;
mod dataset;
mod network;
mod params;

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use config::{HiddenActivation, LayerLayout, NetworkConfig, OutputActivation};
pub use dataset::Dataset;
pub use network::{Network, Sensitivity};
pub use params::{LayerParams, ParamVector};
