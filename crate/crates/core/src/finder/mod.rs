//! The tool finder: keyword, embedding, agent-backed and combined search.

pub mod embedding;
pub mod keyword;
pub mod text;

use std::cmp::Ordering;
use std::collections::HashMap;
use std::sync::Arc;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

use crate::agentic::{agentic_find, Backends, AGENTIC_FIND_LIMIT};
use crate::error::ToolError;
use crate::protocol::ToolSpec;
use crate::registry::{ListFilter, Registry};
use crate::scalar::Scalar;

pub use embedding::{cosine, embedding_search, Embedder, HashingEmbedder, Vector, VectorStore};
pub use keyword::{KeywordConfig, KeywordIndex, ScoreBreakdown, TermContribution};
pub use text::{normalize_text, Normalized, TextNormalizer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Keyword,
    Embedding,
    Agentic,
    Auto,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Keyword => "keyword",
            Strategy::Embedding => "embedding",
            Strategy::Agentic => "agentic",
            Strategy::Auto => "auto",
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Strategy {
    type Err = ToolError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "keyword" => Ok(Strategy::Keyword),
            "embedding" => Ok(Strategy::Embedding),
            "agentic" => Ok(Strategy::Agentic),
            "auto" => Ok(Strategy::Auto),
            other => Err(ToolError::spec_at(
                "strategy",
                format!("unknown strategy '{other}' (expected keyword, embedding, agentic or auto)"),
            )),
        }
    }
}

/// One finder hit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolMatch<F = f64> {
    pub tool_name: String,
    pub score: F,
    pub strategy: Strategy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub breakdown: Option<ScoreBreakdown<F>>,
}

fn desc<F: Scalar>(a: F, b: F) -> Ordering {
    // NaN sorts last.
    match (a.is_nan(), b.is_nan()) {
        (true, true) => Ordering::Equal,
        (true, false) => Ordering::Greater,
        (false, true) => Ordering::Less,
        _ => b.partial_cmp(&a).unwrap_or(Ordering::Equal),
    }
}

/// Score descending, ties by name ascending.
pub fn sort_matches<F: Scalar>(matches: &mut [ToolMatch<F>]) {
    matches.sort_by(|a, b| desc(a.score, b.score).then_with(|| a.tool_name.cmp(&b.tool_name)));
}

/// Immutable search structures for one registry version.
pub struct FinderSnapshot {
    pub version: u64,
    pub specs: Vec<ToolSpec>,
    pub index: KeywordIndex,
    pub store: VectorStore<f64>,
}

/// Finder bound to a registry; snapshots are rebuilt when the registry
/// changes and swapped atomically.
pub struct Finder {
    registry: Arc<Registry>,
    backends: Arc<Backends>,
    embedder: Arc<dyn Embedder<f64>>,
    keyword: KeywordConfig<f64>,
    snapshot: RwLock<Option<Arc<FinderSnapshot>>>,
}

impl Finder {
    pub fn new(registry: Arc<Registry>, backends: Arc<Backends>) -> Self {
        Self::with_embedder(registry, backends, Arc::new(HashingEmbedder::default()))
    }

    pub fn with_embedder(registry: Arc<Registry>, backends: Arc<Backends>, embedder: Arc<dyn Embedder<f64>>) -> Self {
        Self { registry, backends, embedder, keyword: KeywordConfig::default(), snapshot: RwLock::new(None) }
    }

    pub fn with_keyword_config(mut self, config: KeywordConfig<f64>) -> Self {
        self.keyword = config;
        self
    }

    pub fn snapshot(&self) -> Result<Arc<FinderSnapshot>, ToolError> {
        let version = self.registry.version();
        if let Some(s) = self.snapshot.read().as_ref() {
            if s.version == version {
                return Ok(s.clone());
            }
        }
        let specs = self.registry.list_tools(&ListFilter::default());
        let snap = Arc::new(FinderSnapshot {
            version,
            index: KeywordIndex::build(&specs),
            store: VectorStore::build(&specs, self.embedder.as_ref())?,
            specs,
        });
        *self.snapshot.write() = Some(snap.clone());
        Ok(snap)
    }

    pub fn keyword(&self, query: &str, limit: usize) -> Result<Vec<ToolMatch>, ToolError> {
        Ok(self.snapshot()?.index.search(query, limit, &self.keyword))
    }

    pub fn embedding(&self, query: &str, limit: usize) -> Result<Vec<ToolMatch>, ToolError> {
        let snap = self.snapshot()?;
        embedding_search(&snap.store, self.embedder.as_ref(), query, limit)
    }

    /// Keyword hits (scaled by the best keyword score) unioned with
    /// embedding hits (negative similarities floored at zero); a tool found
    /// by both keeps its larger score. Ties prefer the higher keyword score,
    /// so the keyword top hit is never displaced by an equal embedding score.
    pub fn auto(&self, query: &str, limit: usize) -> Result<Vec<ToolMatch>, ToolError> {
        let snap = self.snapshot()?;
        let n = snap.specs.len();
        let kw = snap.index.search(query, n, &self.keyword);
        let emb = embedding_search(&snap.store, self.embedder.as_ref(), query, n)?;
        let top = kw.first().map(|m| m.score).unwrap_or(0.0);
        let mut merged: HashMap<String, (ToolMatch, f64)> = HashMap::new();
        for m in kw {
            let norm = if top > 0.0 { m.score / top } else { 0.0 };
            merged.insert(m.tool_name.clone(), (ToolMatch { score: norm, ..m }, norm));
        }
        for m in emb {
            let s = m.score.max(0.0);
            if s <= 0.0 {
                continue;
            }
            match merged.get_mut(&m.tool_name) {
                Some((existing, _)) => {
                    if s > existing.score {
                        existing.score = s;
                        existing.strategy = Strategy::Embedding;
                    }
                }
                None => {
                    merged.insert(m.tool_name.clone(), (ToolMatch { score: s, ..m }, 0.0));
                }
            }
        }
        let mut out: Vec<(ToolMatch, f64)> = merged.into_values().collect();
        out.sort_by(|(a, ka), (b, kb)| {
            desc(a.score, b.score).then_with(|| desc(*ka, *kb)).then_with(|| a.tool_name.cmp(&b.tool_name))
        });
        Ok(out.into_iter().take(limit).map(|(m, _)| m).collect())
    }

    /// Asks the default agent backend to pick among a prefiltered candidate
    /// set of at most twenty tools.
    pub async fn agentic(&self, query: &str, limit: usize) -> Result<Vec<ToolMatch>, ToolError> {
        let Some(backend) = self.backends.default_id() else {
            return Err(ToolError::execution(
                "agentic search needs an agent backend, but no agent backend is configured",
            )
            .with_detail(serde_json::json!({ "missing": "agent backend" })));
        };
        let snap = self.snapshot()?;
        let mut candidates: Vec<ToolSpec> = self
            .auto(query, AGENTIC_FIND_LIMIT)?
            .iter()
            .filter_map(|m| snap.specs.iter().find(|s| s.name == m.tool_name).cloned())
            .collect();
        if candidates.is_empty() {
            candidates = snap.specs.iter().take(AGENTIC_FIND_LIMIT).cloned().collect();
        }
        if candidates.is_empty() {
            return Ok(Vec::new());
        }
        let outcome = agentic_find(&self.backends, &backend, query, &candidates).await?;
        Ok(outcome.matches.into_iter().take(limit).collect())
    }

    pub async fn find_tool(&self, query: &str, strategy: Strategy, limit: usize) -> Result<Vec<ToolMatch>, ToolError> {
        if limit == 0 {
            return Ok(Vec::new());
        }
        match strategy {
            Strategy::Keyword => self.keyword(query, limit),
            Strategy::Embedding => self.embedding(query, limit),
            Strategy::Auto => self.auto(query, limit),
            Strategy::Agentic => self.agentic(query, limit).await,
        }
    }
}
