//! Dense-vector search: pluggable embedders and an exact linear-scan store.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::text::{tokenize, TextNormalizer};
use super::{sort_matches, Strategy, ToolMatch};
use crate::error::ToolError;
use crate::protocol::ToolSpec;
use crate::scalar::Scalar;

pub const DEFAULT_DIMENSION: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector<F> {
    pub components: Vec<F>,
}

impl<F: Scalar> Vector<F> {
    pub fn new(components: Vec<F>) -> Self {
        Self { components }
    }

    pub fn zeros(dimension: usize) -> Self {
        Self::new(vec![F::zero(); dimension])
    }

    pub fn dimension(&self) -> usize {
        self.components.len()
    }

    pub fn dot(&self, other: &Self) -> F {
        self.components.iter().zip(&other.components).fold(F::zero(), |acc, (&a, &b)| acc + a * b)
    }

    pub fn norm(&self) -> F {
        self.dot(self).sqrt()
    }

    pub fn scaled(&self, factor: F) -> Self {
        Self::new(self.components.iter().map(|&c| c * factor).collect())
    }

    /// Unit vector in the same direction; the zero vector stays zero.
    pub fn normalized(&self) -> Self {
        let n = self.norm();
        if n > F::zero() {
            self.scaled(F::one() / n)
        } else {
            self.clone()
        }
    }
}

/// Cosine similarity clamped to `[-1, 1]`; zero when either side is zero.
pub fn cosine<F: Scalar>(a: &Vector<F>, b: &Vector<F>) -> F {
    let denom = a.norm() * b.norm();
    if denom <= F::zero() {
        return F::zero();
    }
    let c = a.dot(b) / denom;
    c.max(-F::one()).min(F::one())
}

/// Text in, fixed-dimension vector out.
pub trait Embedder<F: Scalar>: Send + Sync {
    fn dimension(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vector<F>, ToolError>;
}

/// Deterministic feature-hashing embedder: each normalized term adds ±1 to
/// one bucket chosen by FNV-1a; the result is L2-normalized. Text with no
/// surviving terms falls back to its raw tokens.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    dimension: usize,
    normalizer: TextNormalizer,
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        Self::new(DEFAULT_DIMENSION)
    }
}

impl HashingEmbedder {
    pub fn new(dimension: usize) -> Self {
        assert!(dimension > 0, "embedding dimension must be positive");
        Self { dimension, normalizer: TextNormalizer::default() }
    }

    fn terms(&self, text: &str) -> Vec<String> {
        let terms = self.normalizer.normalize(text).terms;
        if terms.is_empty() {
            tokenize(text)
        } else {
            terms
        }
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl<F: Scalar> Embedder<F> for HashingEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<Vector<F>, ToolError> {
        let mut v = Vector::<F>::zeros(self.dimension);
        for term in self.terms(text) {
            let h = fnv1a(term.as_bytes());
            let bucket = (h % self.dimension as u64) as usize;
            let sign = if h >> 63 == 0 { F::one() } else { -F::one() };
            v.components[bucket] = v.components[bucket] + sign;
        }
        Ok(v.normalized())
    }
}

/// All tool vectors of one snapshot; every vector shares the store's
/// dimension.
#[derive(Debug, Clone)]
pub struct VectorStore<F> {
    dimension: usize,
    entries: Vec<(String, Vector<F>)>,
}

impl<F: Scalar> VectorStore<F> {
    pub fn empty(dimension: usize) -> Self {
        Self { dimension, entries: Vec::new() }
    }

    /// Embeds every spec's description (the name when the description
    /// yields a zero vector).
    pub fn build<'a>(
        specs: impl IntoIterator<Item = &'a ToolSpec>,
        embedder: &dyn Embedder<F>,
    ) -> Result<Self, ToolError> {
        let mut store = Self::empty(embedder.dimension());
        for spec in specs {
            let mut v = embedder.embed(&spec.description)?;
            if v.norm() <= F::zero() {
                v = embedder.embed(&spec.name.replace('_', " "))?;
            }
            store.insert(spec.name.clone(), v)?;
        }
        Ok(store)
    }

    pub fn from_vectors(
        dimension: usize,
        vectors: impl IntoIterator<Item = (String, Vector<F>)>,
    ) -> Result<Self, ToolError> {
        let mut store = Self::empty(dimension);
        for (name, v) in vectors {
            store.insert(name, v)?;
        }
        Ok(store)
    }

    pub fn insert(&mut self, name: String, vector: Vector<F>) -> Result<(), ToolError> {
        if vector.dimension() != self.dimension {
            return Err(ToolError::spec(format!(
                "embedding for '{name}' has dimension {}, store expects {}",
                vector.dimension(),
                self.dimension
            )));
        }
        self.entries.push((name, vector));
        Ok(())
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn vectors(&self) -> impl Iterator<Item = (&str, &Vector<F>)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    /// Every stored vector multiplied by `factor`.
    pub fn scaled(&self, factor: F) -> Self {
        Self {
            dimension: self.dimension,
            entries: self.entries.iter().map(|(n, v)| (n.clone(), v.scaled(factor))).collect(),
        }
    }

    /// Top-`k` tools by cosine similarity to `query`.
    pub fn search(&self, query: &Vector<F>, k: usize) -> Result<Vec<ToolMatch<F>>, ToolError> {
        if query.dimension() != self.dimension {
            return Err(ToolError::spec(format!(
                "query embedding has dimension {}, store expects {}",
                query.dimension(),
                self.dimension
            )));
        }
        let mut out: Vec<ToolMatch<F>> = self
            .entries
            .iter()
            .map(|(name, v)| ToolMatch {
                tool_name: name.clone(),
                score: cosine(query, v),
                strategy: Strategy::Embedding,
                breakdown: None,
            })
            .collect();
        sort_matches(&mut out);
        out.truncate(k);
        Ok(out)
    }
}

pub fn embedding_search<F: Scalar>(
    store: &VectorStore<F>,
    embedder: &dyn Embedder<F>,
    query: &str,
    k: usize,
) -> Result<Vec<ToolMatch<F>>, ToolError> {
    if embedder.dimension() != store.dimension() {
        return Err(ToolError::spec(format!(
            "embedder dimension {} does not match store dimension {}",
            embedder.dimension(),
            store.dimension()
        )));
    }
    store.search(&embedder.embed(query)?, k)
}

/// Shared embedder handle used by the finder.
pub type SharedEmbedder = Arc<dyn Embedder<f64>>;
