//! Binary checkpoint files.
//!
//! Layout: `b"DCNT"`, `u32` LE format version, `u32` LE byte length of a
//! UTF-8 JSON header (`{"spec": ..., "metadata": ...}`), then the parameters
//! as little-endian `f32` in payload order (layer declaration order, weight
//! before bias).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::network::Network;
use super::spec::ArchitectureSpec;
use super::ZooError;

pub const MAGIC: &[u8; 4] = b"DCNT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint: bad magic {found:?}")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint header truncated: need {needed} bytes, file has {available}")]
    TruncatedHeader { needed: usize, available: usize },
    #[error("checkpoint header is not valid: {0}")]
    Header(#[from] serde_json::Error),
    #[error("checkpoint payload truncated: spec needs {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("checkpoint payload length {found} does not match the {expected} bytes the spec requires")]
    PayloadLengthMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Spec(#[from] ZooError),
}

/// Training provenance stored alongside the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub epoch: usize,
    pub best_val_mae: Option<f64>,
    #[serde(default)]
    pub best_val_mse: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    spec: ArchitectureSpec,
    metadata: TrainingMetadata,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: ArchitectureSpec,
    pub weights: Vec<f32>,
    pub metadata: TrainingMetadata,
}

impl Checkpoint {
    pub fn from_network(network: &Network<f32>, metadata: TrainingMetadata) -> Self {
        Self {
            spec: network.spec().clone(),
            weights: network.flat_params(),
            metadata,
        }
    }

    pub fn to_network(&self) -> Result<Network<f32>, ZooError> {
        Network::from_flat(self.spec.clone(), &self.weights)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&Header {
            spec: self.spec.clone(),
            metadata: self.metadata.clone(),
        })
        .expect("header serializes");
        let mut out = Vec::with_capacity(12 + header.len() + 4 * self.weights.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for w in &self.weights {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let need = |needed: usize| {
            if bytes.len() < needed {
                Err(CheckpointError::TruncatedHeader {
                    needed,
                    available: bytes.len(),
                })
            } else {
                Ok(())
            }
        };
        need(4)?;
        if &bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic {
                found: bytes[..4].to_vec(),
            });
        }
        need(12)?;
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
        let version = word(4);
        if version != FORMAT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let header_len = word(8) as usize;
        need(12 + header_len)?;
        let header: Header = serde_json::from_slice(&bytes[12..12 + header_len])?;
        header.spec.validate()?;
        let payload = &bytes[12 + header_len..];
        let expected = 4 * header.spec.param_count();
        if payload.len() < expected {
            return Err(CheckpointError::TruncatedPayload {
                expected,
                found: payload.len(),
            });
        }
        if payload.len() != expected {
            return Err(CheckpointError::PayloadLengthMismatch {
                expected,
                found: payload.len(),
            });
        }
        let weights = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(Self {
            spec: header.spec,
            weights,
            metadata: header.metadata,
        })
    }

    pub fn write(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

pub fn save_checkpoint(network: &Network<f32>, path: &Path) -> Result<(), CheckpointError> {
    Checkpoint::from_network(network, TrainingMetadata::default()).write(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Network<f32>, CheckpointError> {
    Ok(Checkpoint::read(path)?.to_network()?)
}
