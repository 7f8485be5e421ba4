//! Sparse-autoencoder tooling for embedding vectors: train a BatchTopK SAE on
//! a corpus of precomputed embeddings, inspect the learned dictionary, build
//! style profiles from reference codes, and steer embeddings by decoded
//! profile residuals.
//!
//! The crate is organized around the pipeline stages:
//!
//! - [`store`]: binary embedding files, manifests, dedup, batching, stats.
//! - [`sae`]: the model itself — encode, BatchTopK sparsify, decode, loss,
//!   analytic gradients, checkpoints.
//! - [`train`]: Adam with linear warmup, dead-feature tracking, threshold
//!   calibration, the training loop, history files.
//! - [`diagnostics`]: reconstruction R², mean L0, dead fraction, decoder
//!   stable rank.
//! - [`styling`]: style profiles, profile diff/composition, steering
//!   residuals and steered embeddings.
//! - [`autointerp`]: exemplar retrieval, concept ranking, the labeling
//!   prompt, and the label-service client contract.
//!
//! Everything randomized goes through [`rng::Rng`], so every run is exactly
//! reproducible from a 64-bit seed.

pub mod autointerp;
pub mod diagnostics;
pub mod rng;
pub mod sae;
pub mod store;
pub mod styling;
pub mod train;

use std::path::{Path, PathBuf};

/// Crate-wide error type. Variants are grouped by how the caller should
/// react: `InvalidData` means the inputs (file contents, shapes, parameter
/// ranges) are wrong, `Io` means the filesystem failed, `Transport` means a
/// remote label service misbehaved.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{0}")]
    InvalidData(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("label service: {0}")]
    Transport(String),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidData(msg.into())
    }

    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
