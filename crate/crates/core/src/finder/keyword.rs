//! TF-IDF keyword index over tool names and descriptions.
//!
//! Per tool: `score = Σ tf(t)·idf(t)·ln(1 + qf(t))` over the distinct query
//! terms present in the tool, then ×`name_bonus` once when any query term
//! occurs in the name and ×`phrase_bonus` once when any query bigram or
//! trigram occurs verbatim in a description.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::text::TextNormalizer;
use super::{sort_matches, Strategy, ToolMatch};
use crate::protocol::ToolSpec;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeywordConfig<F> {
    pub name_bonus: F,
    pub phrase_bonus: F,
}

impl<F: Scalar> Default for KeywordConfig<F> {
    fn default() -> Self {
        Self { name_bonus: F::from_f64_lossy(2.0), phrase_bonus: F::from_f64_lossy(1.5) }
    }
}

impl<F: Scalar> KeywordConfig<F> {
    pub fn without_name_bonus(mut self) -> Self {
        self.name_bonus = F::one();
        self
    }

    pub fn without_phrase_bonus(mut self) -> Self {
        self.phrase_bonus = F::one();
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermContribution<F> {
    pub term: String,
    pub tf: u32,
    pub idf: F,
    pub query_frequency: u32,
    pub contribution: F,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreBreakdown<F> {
    /// Sum of term frequencies over matched query terms.
    pub tf: u32,
    pub terms: Vec<TermContribution<F>>,
    pub base: F,
    pub name_bonus_applied: bool,
    pub phrase_bonus_applied: bool,
    #[serde(rename = "final")]
    pub final_score: F,
}

#[derive(Debug, Clone)]
struct IndexedTool {
    name: String,
    tf: HashMap<String, u32>,
    name_terms: HashSet<String>,
    phrases: HashSet<String>,
}

/// Postings for a snapshot of specs; immutable once built.
#[derive(Debug, Clone)]
pub struct KeywordIndex {
    tools: Vec<IndexedTool>,
    df: HashMap<String, usize>,
    normalizer: TextNormalizer,
}

/// Description-field segments: the tool description and each parameter
/// description. Phrases never span two segments.
pub fn description_segments(spec: &ToolSpec) -> Vec<&str> {
    std::iter::once(spec.description.as_str())
        .chain(spec.parameters.iter().map(|p| p.description.as_str()))
        .filter(|s| !s.trim().is_empty())
        .collect()
}

impl KeywordIndex {
    pub fn build<'a>(specs: impl IntoIterator<Item = &'a ToolSpec>) -> Self {
        Self::build_with(specs, TextNormalizer::default())
    }

    pub fn build_with<'a>(specs: impl IntoIterator<Item = &'a ToolSpec>, normalizer: TextNormalizer) -> Self {
        let mut tools = Vec::new();
        let mut df: HashMap<String, usize> = HashMap::new();
        for spec in specs {
            let name_terms = normalizer.normalize(&spec.name).terms;
            let mut tf: HashMap<String, u32> = HashMap::new();
            for t in &name_terms {
                *tf.entry(t.clone()).or_default() += 1;
            }
            let mut phrases = HashSet::new();
            for segment in description_segments(spec) {
                let norm = normalizer.normalize(segment);
                for t in &norm.terms {
                    *tf.entry(t.clone()).or_default() += 1;
                }
                phrases.extend(norm.phrases().cloned());
            }
            for term in tf.keys() {
                *df.entry(term.clone()).or_default() += 1;
            }
            tools.push(IndexedTool {
                name: spec.name.clone(),
                tf,
                name_terms: name_terms.into_iter().collect(),
                phrases,
            });
        }
        tools.sort_by(|a, b| a.name.cmp(&b.name));
        Self { tools, df, normalizer }
    }

    /// Number of indexed tools.
    pub fn len(&self) -> usize {
        self.tools.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tools.is_empty()
    }

    pub fn df(&self, term: &str) -> usize {
        self.df.get(term).copied().unwrap_or(0)
    }

    pub fn tf(&self, tool: &str, term: &str) -> u32 {
        self.tools.iter().find(|t| t.name == tool).and_then(|t| t.tf.get(term).copied()).unwrap_or(0)
    }

    /// `ln(N / (1 + df)) + 1`, clamped at zero.
    pub fn idf<F: Scalar>(&self, term: &str) -> F {
        let n = F::from_count(self.tools.len());
        let df = F::from_count(self.df(term));
        let v = (n / (F::one() + df)).ln() + F::one();
        if v > F::zero() {
            v
        } else {
            F::zero()
        }
    }

    pub fn search<F: Scalar>(&self, query: &str, limit: usize, config: &KeywordConfig<F>) -> Vec<ToolMatch<F>> {
        if self.tools.is_empty() || limit == 0 {
            return Vec::new();
        }
        let q = self.normalizer.normalize(query);
        if q.is_empty() {
            return Vec::new();
        }
        // Distinct query terms in first-occurrence order with their counts.
        let mut order: Vec<&str> = Vec::new();
        let mut qf: HashMap<&str, u32> = HashMap::new();
        for t in &q.terms {
            let c = qf.entry(t.as_str()).or_insert(0);
            if *c == 0 {
                order.push(t.as_str());
            }
            *c += 1;
        }
        let idf: HashMap<&str, F> = order.iter().map(|t| (*t, self.idf::<F>(t))).collect();

        let mut out = Vec::new();
        for tool in &self.tools {
            let mut terms = Vec::new();
            let mut base = F::zero();
            let mut tf_total = 0;
            for term in &order {
                let Some(&tf) = tool.tf.get(*term) else { continue };
                let qfv = qf[term];
                let contribution =
                    F::from_count(tf as usize) * idf[term] * (F::one() + F::from_count(qfv as usize)).ln();
                base = base + contribution;
                tf_total += tf;
                terms.push(TermContribution {
                    term: term.to_string(),
                    tf,
                    idf: idf[term],
                    query_frequency: qfv,
                    contribution,
                });
            }
            if terms.is_empty() {
                continue;
            }
            let name_hit = order.iter().any(|t| tool.name_terms.contains(*t));
            let phrase_hit = q.phrases().any(|p| tool.phrases.contains(p));
            let mut final_score = base;
            if name_hit {
                final_score = final_score * config.name_bonus;
            }
            if phrase_hit {
                final_score = final_score * config.phrase_bonus;
            }
            out.push(ToolMatch {
                tool_name: tool.name.clone(),
                score: final_score,
                strategy: Strategy::Keyword,
                breakdown: Some(ScoreBreakdown {
                    tf: tf_total,
                    terms,
                    base,
                    name_bonus_applied: name_hit,
                    phrase_bonus_applied: phrase_hit,
                    final_score,
                }),
            });
        }
        sort_matches(&mut out);
        out.truncate(limit);
        out
    }
}
