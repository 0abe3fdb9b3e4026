//! Text embeddings: the provider contract, a deterministic hashing embedder
//! for offline use, and cosine similarity.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

/// Default dimension of the hashing embedder.
pub const DEFAULT_HASH_DIMENSION: usize = 256;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EmbeddingError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("embedding dimension must be at least 2, got {0}")]
    InvalidDimension(usize),
    #[error("embedding contains a non-finite value")]
    NonFinite,
    #[error("stored vector is neither unit-length nor zero")]
    NotNormalized,
    #[error("embedding batch is empty")]
    EmptyBatch,
    #[error("embedding provider unreachable: {0}")]
    ProviderUnreachable(String),
    #[error("malformed embedding provider response: {0}")]
    ProviderMalformedResponse(String),
}

/// A unit-length vector, or the all-zero vector standing in for empty text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    /// L2-normalizes `values`. An all-zero input stays zero.
    pub fn normalized(mut values: Vec<f64>) -> Result<Self, EmbeddingError> {
        if values.len() < 2 {
            return Err(EmbeddingError::InvalidDimension(values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite);
        }
        let norm = l2_norm(&values);
        if norm > 0.0 {
            if !norm.is_finite() {
                return Err(EmbeddingError::NonFinite);
            }
            for v in &mut values {
                *v /= norm;
            }
        }
        Ok(Self(values))
    }

    pub fn zeros(dimension: usize) -> Self {
        Self(vec![0.0; dimension])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dimension(&self) -> usize {
        self.0.len()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|v| *v == 0.0)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for EmbeddingVector {
    type Error = EmbeddingError;

    /// Accepts stored vectors as-is after checking the norm invariant.
    fn try_from(values: Vec<f64>) -> Result<Self, Self::Error> {
        if values.len() < 2 {
            return Err(EmbeddingError::InvalidDimension(values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite);
        }
        let norm = l2_norm(&values);
        if norm != 0.0 && libm::fabs(norm - 1.0) > 1e-6 {
            return Err(EmbeddingError::NotNormalized);
        }
        Ok(Self(values))
    }
}

impl From<EmbeddingVector> for Vec<f64> {
    fn from(v: EmbeddingVector) -> Self {
        v.0
    }
}

fn l2_norm(values: &[f64]) -> f64 {
    libm::sqrt(values.iter().map(|v| v * v).sum())
}

/// 64-bit FNV-1a.
pub fn fnv1a_64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |hash, b| {
        (hash ^ u64::from(*b)).wrapping_mul(FNV_PRIME)
    })
}

/// Lowercases `text` and splits it on runs of non-alphanumeric characters.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(String::from)
        .collect()
}

/// Bag-of-tokens embedding: every token adds 1 to bucket `fnv1a(token) mod dimension`,
/// then the counts are L2-normalized. Text with no tokens maps to the zero vector.
///
/// Panics if `dimension < 2`.
pub fn hash_embed(text: &str, dimension: usize) -> EmbeddingVector {
    assert!(dimension >= 2, "hash_embed dimension must be at least 2");
    let mut counts = vec![0.0; dimension];
    for token in tokenize(text) {
        let bucket = (fnv1a_64(token.as_bytes()) % dimension as u64) as usize;
        counts[bucket] += 1.0;
    }
    EmbeddingVector::normalized(counts).expect("counts are finite")
}

/// Cosine similarity clamped to [-1, 1]; 0.0 when either side is the zero vector.
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EmbeddingError> {
    cosine_slices(a.values(), b.values())
}

pub(crate) fn cosine_slices(a: &[f64], b: &[f64]) -> Result<f64, EmbeddingError> {
    if a.len() != b.len() {
        return Err(EmbeddingError::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Anything that turns text into embedding vectors.
pub trait Embedder: Send + Sync {
    /// Embeds every text, preserving order. Implementations reject empty batches.
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbeddingError>;

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
        self.embed_batch(&[text])?
            .pop()
            .ok_or_else(|| EmbeddingError::ProviderMalformedResponse("no vector returned".into()))
    }

    /// Output dimension, when known without making a request.
    fn dimension(&self) -> Option<usize> {
        None
    }
}

impl<E: Embedder + ?Sized> Embedder for &E {
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        (**self).embed_batch(texts)
    }

    fn dimension(&self) -> Option<usize> {
        (**self).dimension()
    }
}

impl<E: Embedder + ?Sized> Embedder for alloc::sync::Arc<E> {
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        (**self).embed_batch(texts)
    }

    fn dimension(&self) -> Option<usize> {
        (**self).dimension()
    }
}

/// Deterministic offline embedder backed by [`hash_embed`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashEmbedder {
    dimension: usize,
}

impl HashEmbedder {
    pub fn new(dimension: usize) -> Result<Self, EmbeddingError> {
        if dimension < 2 {
            return Err(EmbeddingError::InvalidDimension(dimension));
        }
        Ok(Self { dimension })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self {
            dimension: DEFAULT_HASH_DIMENSION,
        }
    }
}

impl Embedder for HashEmbedder {
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        if texts.is_empty() {
            return Err(EmbeddingError::EmptyBatch);
        }
        Ok(texts.iter().map(|t| hash_embed(t, self.dimension)).collect())
    }

    fn dimension(&self) -> Option<usize> {
        Some(self.dimension)
    }
}
