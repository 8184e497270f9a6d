//! Embedding vectors, providers and exact cosine retrieval.

mod index;
mod providers;
mod rices;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use index::{EmbeddingIndex, IndexBuilder, Neighbor, RetrievalResult, SearchIndex};
pub use providers::{embed, EmbedItem, EmbeddingProvider, FeatureHashProvider, FileProvider, HashedRandomProvider};
pub use rices::{retrieve_exemplars, text_input, RetrievalMode};

/// Tolerance for cosine values drifting outside [-1, 1] before clamping.
pub const COSINE_EPS: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum EmbedError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("vector has zero norm")]
    ZeroNorm,
    #[error("vector has a non-finite entry at {0}")]
    NonFinite(usize),
    #[error("provider unavailable: {0}")]
    ProviderUnavailable(String),
    #[error("index has no candidates left after exclusion")]
    EmptyIndex,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("id {0:?} is not in the index")]
    UnknownId(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Text,
    Video,
}

/// A finite, non-zero vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(Vec<f32>);

impl EmbeddingVector {
    pub fn new(values: Vec<f32>) -> Result<Self, EmbedError> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(EmbedError::NonFinite(i));
        }
        if norm(&values) == 0.0 {
            return Err(EmbedError::ZeroNorm);
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }
}

pub(crate) fn dot(u: &[f32], v: &[f32]) -> f64 {
    u.iter().zip(v).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum()
}

pub(crate) fn norm(u: &[f32]) -> f64 {
    dot(u, u).sqrt()
}

/// Cosine similarity in f64, clamped to [-1, 1].
pub fn cosine(u: &[f32], v: &[f32]) -> Result<f64, EmbedError> {
    if u.len() != v.len() {
        return Err(EmbedError::DimMismatch {
            expected: u.len(),
            found: v.len(),
        });
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(EmbedError::ZeroNorm);
    }
    let c = dot(u, v) / (nu * nv);
    debug_assert!(c.abs() <= 1.0 + COSINE_EPS, "cosine {c} out of range");
    Ok(c.clamp(-1.0, 1.0))
}
