//! Crowd-density estimation engine: a small autodiff core, the compact
//! multi-column counting network and a MobileNetV2 variant, point-supervised
//! Bayesian loss, ℓₙ channel pruning, Adam training and count evaluation.

pub mod compute;
pub mod evaluator;
pub mod groundtruth;
pub mod losses;
pub mod pruner;
pub mod trainer;
pub mod zoo;
