//! Text embeddings and cosine similarity.
//!
//! Retrieval only needs two things from an embedding provider: a way to turn
//! text into a fixed-dimension vector, and cosine similarity between vectors.
//! The [`Embedder`] trait abstracts the provider; [`TokenHashEmbedder`] is a
//! deterministic, dependency-free implementation used by tests and scripted
//! runs, and [`crate::live::HttpEmbedder`] calls a real embedding service.

use std::collections::HashMap;
use std::sync::Mutex;

use thiserror::Error;

/// Number of hash buckets (vector dimension) used by [`TokenHashEmbedder`].
pub const TOKEN_HASH_DIMENSION: usize = 256;

const FNV_OFFSET_BASIS: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Errors produced while embedding text or comparing vectors.
#[derive(Debug, Error)]
pub enum EmbedError {
    /// The text contained no tokens (empty or all punctuation/whitespace).
    #[error("cannot embed text with no tokens")]
    EmptyText,
    /// Two vectors of different dimensions were compared.
    #[error("vector dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    /// A vector had zero magnitude, so cosine similarity is undefined.
    #[error("zero-magnitude vector has no direction")]
    ZeroVector,
    /// The embedding provider failed.
    #[error("embedding backend error: {0}")]
    Backend(String),
}

/// A dense embedding vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(pub Vec<f64>);

impl EmbeddingVector {
    /// Dimension of the vector.
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// Euclidean norm.
    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Returns a unit-norm copy, or [`EmbedError::ZeroVector`] if the vector
    /// has no magnitude.
    pub fn normalized(&self) -> Result<EmbeddingVector, EmbedError> {
        let n = self.norm();
        if n == 0.0 || !n.is_finite() {
            return Err(EmbedError::ZeroVector);
        }
        Ok(EmbeddingVector(self.0.iter().map(|x| x / n).collect()))
    }
}

/// Cosine similarity between two vectors, clamped to [-1, 1] to absorb
/// floating-point drift. Errors on dimension mismatch or zero vectors.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EmbedError> {
    if a.dim() != b.dim() {
        return Err(EmbedError::DimensionMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    let na = a.norm();
    let nb = b.norm();
    if na == 0.0 || nb == 0.0 {
        return Err(EmbedError::ZeroVector);
    }
    let dot: f64 = a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Something that can embed text into a vector space.
pub trait Embedder: Send + Sync {
    /// Embed one text. Implementations must be deterministic for a given
    /// input within a process run.
    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError>;
}

/// Deterministic bag-of-tokens embedder.
///
/// The text is lowercased and split on runs of non-alphanumeric characters;
/// each token is hashed with 64-bit FNV-1a into one of
/// [`TOKEN_HASH_DIMENSION`] buckets; bucket counts are L2-normalized.
/// Identical texts always embed identically, and texts sharing no token
/// buckets are exactly orthogonal — which is what makes scripted retrieval
/// fixtures exact.
#[derive(Debug, Default, Clone, Copy)]
pub struct TokenHashEmbedder;

/// 64-bit FNV-1a hash of a token's UTF-8 bytes.
fn fnv1a64(token: &str) -> u64 {
    let mut hash = FNV_OFFSET_BASIS;
    for byte in token.as_bytes() {
        hash ^= u64::from(*byte);
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

/// Bucket index for a token under [`TokenHashEmbedder`].
pub fn token_bucket(token: &str) -> usize {
    (fnv1a64(token) % TOKEN_HASH_DIMENSION as u64) as usize
}

/// Lowercased alphanumeric tokens of `text`, in order.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

impl Embedder for TokenHashEmbedder {
    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(EmbedError::EmptyText);
        }
        let mut counts = vec![0.0f64; TOKEN_HASH_DIMENSION];
        for token in &tokens {
            counts[token_bucket(token)] += 1.0;
        }
        EmbeddingVector(counts).normalized()
    }
}

/// Caching wrapper: embeds each distinct text at most once per process.
///
/// Live embedding calls are paid and rate-limited, and retrieval re-embeds
/// the same experience texts for every task in a batch, so memoization is
/// load-bearing rather than cosmetic.
pub struct MemoEmbedder<E> {
    inner: E,
    cache: Mutex<HashMap<String, EmbeddingVector>>,
}

impl<E: Embedder> MemoEmbedder<E> {
    pub fn new(inner: E) -> Self {
        Self {
            inner,
            cache: Mutex::new(HashMap::new()),
        }
    }

    /// Number of distinct texts cached so far.
    pub fn cached_count(&self) -> usize {
        self.cache.lock().expect("embed cache poisoned").len()
    }
}

impl<E: Embedder> Embedder for MemoEmbedder<E> {
    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        if let Some(hit) = self
            .cache
            .lock()
            .expect("embed cache poisoned")
            .get(text)
            .cloned()
        {
            return Ok(hit);
        }
        let vector = self.inner.embed(text)?;
        self.cache
            .lock()
            .expect("embed cache poisoned")
            .insert(text.to_owned(), vector.clone());
        Ok(vector)
    }
}
