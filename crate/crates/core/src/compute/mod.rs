//! Tensors, the autodiff tape, and the layer kernels the networks use.

mod activation;
mod conv;
mod element;
mod pool;
mod tape;
mod tensor;
mod upsample;

pub use activation::{activation, ActivationKind};
pub use conv::{conv2d, depthwise_conv2d, output_extent};
pub use element::Element;
pub use pool::maxpool2d;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
pub use upsample::bilinear_upsample;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ComputeError {
    #[error("{op}: shape contract violated: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: invalid argument: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
}

impl ComputeError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Self::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn argument(op: &'static str, detail: impl Into<String>) -> Self {
        Self::InvalidArgument {
            op,
            detail: detail.into(),
        }
    }
}
