//! Agent-driven refinement: improving the descriptions of existing tools
//! and generating new tools from a plain-language requirement.
//!
//! Every agent exchange uses one prompt layout: a `ROLE: <name>` line,
//! then sections introduced by `### <NAME>` lines whose bodies are JSON
//! (or plain text for `REQUEST`). Backends that want structure can read
//! sections back with [`prompt_section`]; the rubric backend does exactly
//! that.

pub mod discover;
pub mod optimizer;
pub mod rubric;
pub mod testgen;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::agentic::{extract_json, retry_prompt, Backends, GenerationSettings};
use crate::error::ToolError;
use crate::protocol::{ToolResult, ToolSpec};

pub use discover::{discover_tool, DiscoverConfig, ToolPackage};
pub use optimizer::{optimize_tool, OptimizationOutcome, OptimizeConfig, Termination};
pub use rubric::{rubric_backend, with_rubric};
pub use testgen::{generate_test_cases, CasePurpose, Provenance, TestBatch, TestCase};

pub const OPTIMIZER_DIMENSIONS: [&str; 6] =
    ["clarity", "accuracy", "completeness", "conciseness", "user-friendliness", "redundancy-avoidance"];

pub const DISCOVER_DIMENSIONS: [&str; 5] =
    ["functionality", "reliability", "maintainability", "performance", "test-coverage"];

/// Declared weights of the discover dimensions, in dimension order.
pub const DISCOVER_WEIGHTS: [f64; 5] = [0.3, 0.25, 0.15, 0.1, 0.2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DimensionSet {
    /// Description quality, equally weighted.
    Optimizer,
    /// Generated-tool quality, weighted.
    Discover,
}

impl DimensionSet {
    pub fn dimensions(self) -> &'static [&'static str] {
        match self {
            DimensionSet::Optimizer => &OPTIMIZER_DIMENSIONS,
            DimensionSet::Discover => &DISCOVER_DIMENSIONS,
        }
    }

    pub fn weights(self) -> Vec<f64> {
        match self {
            DimensionSet::Optimizer => vec![1.0 / 6.0; 6],
            DimensionSet::Discover => DISCOVER_WEIGHTS.to_vec(),
        }
    }

    /// Arithmetic mean for the optimizer, weighted mean for discover.
    /// Rounded to 1e-10 so hand-derived values compare exactly.
    pub fn overall(self, scores: &BTreeMap<String, f64>) -> f64 {
        let dims = self.dimensions();
        let raw = match self {
            DimensionSet::Optimizer => dims.iter().map(|d| scores[*d]).sum::<f64>() / dims.len() as f64,
            DimensionSet::Discover => dims.iter().zip(DISCOVER_WEIGHTS).map(|(d, w)| w * scores[*d]).sum(),
        };
        (raw * 1e10).round() / 1e10
    }
}

/// Scores in [0, 10] for exactly the dimensions of one set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub dimension_set: DimensionSet,
    pub scores: BTreeMap<String, f64>,
    pub overall: f64,
    #[serde(default)]
    pub rationale: BTreeMap<String, String>,
    pub round: usize,
}

impl QualityReport {
    pub fn new(set: DimensionSet, scores: BTreeMap<String, f64>, round: usize) -> Result<Self, String> {
        let expected: BTreeSet<&str> = set.dimensions().iter().copied().collect();
        let got: BTreeSet<&str> = scores.keys().map(String::as_str).collect();
        if expected != got {
            let missing: Vec<_> = expected.difference(&got).collect();
            let extra: Vec<_> = got.difference(&expected).collect();
            return Err(format!("scores must cover exactly the dimensions; missing {missing:?}, unexpected {extra:?}"));
        }
        for (d, s) in &scores {
            if !s.is_finite() || !(0.0..=10.0).contains(s) {
                return Err(format!("score '{d}' = {s} is outside [0, 10]"));
            }
        }
        Ok(Self { dimension_set: set, overall: set.overall(&scores), scores, rationale: BTreeMap::new(), round })
    }

    /// Dimensions scoring below `bar`, in dimension order.
    pub fn flagged(&self, bar: f64) -> Vec<&'static str> {
        self.dimension_set.dimensions().iter().copied().filter(|d| self.scores[*d] < bar).collect()
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("report serializes")
    }
}

/// Sentence split on `.`, `!` or `?` followed by whitespace or the end.
pub fn sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current = String::new();
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        current.push(c);
        if matches!(c, '.' | '!' | '?') && chars.peek().is_none_or(|n| n.is_whitespace()) {
            let s = current.trim();
            if !s.is_empty() {
                out.push(s.to_string());
            }
            current.clear();
        }
    }
    let s = current.trim();
    if !s.is_empty() {
        out.push(s.to_string());
    }
    out
}

/// Lowercased, whitespace-collapsed, without trailing punctuation.
pub fn normalize_sentence(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase().trim_end_matches(['.', '!', '?', ' ']).to_string()
}

fn normalized_set(text: &str) -> BTreeSet<String> {
    sentences(text).iter().map(|s| normalize_sentence(s)).filter(|s| !s.is_empty()).collect()
}

/// Normalized sentences of the tool description that also appear in some
/// parameter description.
pub fn shared_sentences(spec: &ToolSpec) -> Vec<String> {
    let tool = normalized_set(&spec.description);
    let params: BTreeSet<String> = spec.parameters.iter().flat_map(|p| normalized_set(&p.description)).collect();
    tool.intersection(&params).cloned().collect()
}

/// Extra occurrences of any normalized sentence across the tool and
/// parameter descriptions.
pub fn duplicate_sentence_count(spec: &ToolSpec) -> usize {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let docs = std::iter::once(spec.description.as_str()).chain(spec.parameters.iter().map(|p| p.description.as_str()));
    for doc in docs {
        for s in sentences(doc) {
            let n = normalize_sentence(&s);
            if !n.is_empty() {
                *counts.entry(n).or_default() += 1;
            }
        }
    }
    counts.values().map(|c| c - 1).sum()
}

/// `text` without the sentences whose normalized form is in `banned`.
pub fn remove_sentences(text: &str, banned: &BTreeSet<String>) -> String {
    sentences(text).into_iter().filter(|s| !banned.contains(&normalize_sentence(s))).collect::<Vec<_>>().join(" ")
}

/// Builds a prompt in the shared layout.
pub fn build_prompt(role: &str, instructions: &str, sections: &[(&str, String)]) -> String {
    let mut p = format!("ROLE: {role}\n{instructions}\n");
    for (name, body) in sections {
        p.push_str(&format!("\n### {name}\n{body}\n"));
    }
    p
}

pub fn prompt_role(prompt: &str) -> Option<&str> {
    prompt.lines().next()?.strip_prefix("ROLE: ").map(str::trim)
}

/// Body of section `name`, up to the next section header.
pub fn prompt_section<'a>(prompt: &'a str, name: &str) -> Option<&'a str> {
    let header = format!("\n### {name}\n");
    let start = prompt.find(&header)? + header.len();
    let rest = &prompt[start..];
    let end = rest.find("\n### ").unwrap_or(rest.len());
    Some(rest[..end].trim())
}

pub fn prompt_json(prompt: &str, name: &str) -> Option<Value> {
    serde_json::from_str(prompt_section(prompt, name)?).ok()
}

/// Result rows shown to agents: what was sent and what came back.
pub fn observations(cases: &[TestCase], results: &[ToolResult]) -> Value {
    Value::Array(
        cases
            .iter()
            .zip(results)
            .map(|(c, r)| {
                let mut row = json!({
                    "purpose": c.purpose,
                    "arguments": c.call.arguments,
                    "duration_ms": r.duration_ms,
                });
                match &r.outcome {
                    Ok(v) => {
                        row["status"] = json!("ok");
                        row["payload"] = v.clone();
                    }
                    Err(e) => {
                        row["status"] = json!("error");
                        row["error"] = json!({ "code": e.code, "message": e.message });
                    }
                }
                row
            })
            .collect(),
    )
}

/// Generates and parses, retrying once with the parse error appended.
pub(crate) async fn ask<T>(
    backends: &Backends,
    backend: &str,
    prompt: &str,
    parse: impl Fn(&str) -> Result<T, String>,
) -> Result<T, ToolError> {
    let settings = GenerationSettings { temperature: Some(0.0) };
    let first = backends.generate(backend, prompt, &settings).await?;
    let err = match parse(&first) {
        Ok(v) => return Ok(v),
        Err(e) => e,
    };
    let second = backends.generate(backend, &retry_prompt(prompt, &err), &settings).await?;
    parse(&second).map_err(|e2| {
        ToolError::execution(format!("agent output failed to parse twice: {e2}"))
            .with_detail(json!({ "first_error": err, "second_error": e2 }))
    })
}

/// Asks for scores on `set` and builds the report; `overall` is always
/// recomputed locally.
pub async fn evaluate_quality(
    backends: &Backends,
    backend: &str,
    set: DimensionSet,
    sections: Vec<(&str, String)>,
    round: usize,
) -> Result<QualityReport, ToolError> {
    let (role, subject) = match set {
        DimensionSet::Optimizer => ("DescriptionQualityEvaluator", "the tool's descriptions"),
        DimensionSet::Discover => ("ToolQualityEvaluator", "the generated tool"),
    };
    let mut all = vec![("DIMENSIONS", json!(set.dimensions()).to_string())];
    all.extend(sections);
    let prompt = build_prompt(
        role,
        &format!(
            "Score {subject} from 0 to 10 on each listed dimension, using the spec and the observed test executions. \
             Respond with JSON: {{\"scores\": {{dimension: number}}, \"rationale\": {{dimension: text}}}}."
        ),
        &all,
    );
    ask(backends, backend, &prompt, |text| {
        let v = extract_json(text).ok_or("output is not JSON")?;
        let scores: BTreeMap<String, f64> = v
            .get("scores")
            .and_then(Value::as_object)
            .ok_or("report has no 'scores' object")?
            .iter()
            .map(|(k, s)| s.as_f64().map(|x| (k.clone(), x)).ok_or(format!("score '{k}' is not a number")))
            .collect::<Result<_, _>>()?;
        let mut report = QualityReport::new(set, scores, round)?;
        if let Some(r) = v.get("rationale").and_then(Value::as_object) {
            report.rationale = r.iter().filter_map(|(k, t)| Some((k.clone(), t.as_str()?.to_string()))).collect();
        }
        Ok(report)
    })
    .await
}
