//! Architecture-agnostic NeRF weight-space embeddings.
//!
//! The pipeline: procedural scenes are fitted by three NeRF families
//! (plain MLP, tri-plane, multi-resolution hash table), checkpoints are
//! converted to parameter graphs, a message-passing graph encoder plus a
//! conditioned radiance-field decoder are trained with rendering and
//! pairwise-sigmoid contrastive objectives, and the frozen embeddings are
//! evaluated on classification and cross-architecture instance retrieval.

pub mod config;
pub mod datagen;
pub mod decoder;
pub mod downstream;
pub mod fields;
pub mod gmn;
pub mod ngc;
pub mod paramgraph;
pub mod pipeline;
pub mod renderer;
pub mod scenes;
pub mod training;

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Kernel(#[from] adkernel::KernelError),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Format(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("missing artifact {path}: {hint}")]
    MissingArtifact { path: PathBuf, hint: String },
    #[error("{0}")]
    Invalid(String),
    #[error("training aborted at step {step}: non-finite loss; last good checkpoint at {last_good}")]
    TrainAborted { step: usize, last_good: PathBuf },
    #[error("quality gate: scene {scene} family {family} reached {psnr:.2} dB (< {gate:.2} dB) after retry")]
    QualityGate { scene: String, family: String, psnr: f64, gate: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }
}

/// Deterministic per-purpose RNG stream derived from a master seed.
pub fn rng_stream(seed: u64, stream: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stable 64-bit mix for deriving stream ids from structured keys.
pub fn mix(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9e3779b97f4a7c15;
    for &p in parts {
        h ^= p.wrapping_add(0x9e3779b97f4a7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = h.wrapping_mul(0xbf58476d1ce4e5b9);
        h ^= h >> 27;
    }
    h
}
