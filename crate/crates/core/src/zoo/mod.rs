//! Architecture descriptions, network construction, initialization,
//! parameter accounting and checkpoints.

mod checkpoint;
mod network;
pub mod presets;
mod spec;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, TrainingMetadata};
pub use network::{Forward, Network};
pub use spec::{ArchitectureSpec, LayerSpec, OutputHead, ParamShape};

use thiserror::Error;

use crate::compute::{ComputeError, Element};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ZooError {
    #[error("invalid architecture: {0}")]
    InvalidSpec(String),
    #[error("unknown architecture '{0}'")]
    UnknownArchitecture(String),
    #[error("weight buffer holds {found} values, architecture needs {expected}")]
    WeightCount { expected: usize, found: usize },
    #[error(transparent)]
    Compute(#[from] ComputeError),
}

/// The compact multi-column network, full or channel-pruned.
pub fn build_ccnn<T: Element>(pruned: bool) -> Network<T> {
    Network::zeros(presets::ccnn(pruned)).expect("preset is valid")
}

pub fn build_bl_mobilenetv2<T: Element>() -> Network<T> {
    Network::zeros(presets::bl_mobilenetv2()).expect("preset is valid")
}

pub fn build(name: &str) -> Result<Network<f32>, ZooError> {
    Network::zeros(presets::by_name(name)?)
}

pub fn param_count<T: Element>(network: &Network<T>) -> usize {
    network.param_count()
}
