//! A rule-based stand-in for the refinement agents, so optimization and
//! discovery run offline and score predictably.
//!
//! Description rubric (optimizer dimensions, each starting at 10):
//! - redundancy-avoidance: -2 per duplicated sentence across the tool and
//!   parameter descriptions,
//! - completeness: -3 when the tool description is under 20 characters,
//! - clarity: -2 per parameter without a description.
//!
//! Generated-tool rubric (discover dimensions):
//! - functionality: 10 x share of valid calls that succeeded (0 if none),
//! - reliability: 10 x share of invalid probes rejected by validation,
//! - maintainability: 10, -2 per static issue, -3 for a description under
//!   20 characters,
//! - performance: 10, or 6 when any call took over a second,
//! - test-coverage: 10 x share of parameters exercised by a successful call.
//!
//! Scores are clamped to [0, 10]. The analyzer role appends the observed
//! return fields that the description does not mention; the argument role
//! keeps existing descriptions and fills empty ones.

use std::collections::{BTreeMap, BTreeSet};

use serde_json::{json, Value};

use super::{duplicate_sentence_count, prompt_json, prompt_role, DimensionSet};
use crate::agentic::MockBackend;
use crate::protocol::{spec_from_value, ToolSpec};

pub const SHORT_DESCRIPTION: usize = 20;
pub const SLOW_CALL_MS: f64 = 1000.0;

fn clamp(x: f64) -> f64 {
    x.clamp(0.0, 10.0)
}

fn short(spec: &ToolSpec) -> bool {
    spec.description.trim().chars().count() < SHORT_DESCRIPTION
}

/// Description-quality scores with one rationale line per deduction.
pub fn description_scores(spec: &ToolSpec) -> (BTreeMap<String, f64>, BTreeMap<String, String>) {
    let mut scores: BTreeMap<String, f64> =
        DimensionSet::Optimizer.dimensions().iter().map(|d| (d.to_string(), 10.0)).collect();
    let mut why = BTreeMap::new();
    let dups = duplicate_sentence_count(spec);
    if dups > 0 {
        scores.insert("redundancy-avoidance".into(), clamp(10.0 - 2.0 * dups as f64));
        why.insert("redundancy-avoidance".into(), format!("{dups} duplicated sentence(s)"));
    }
    if short(spec) {
        scores.insert("completeness".into(), 7.0);
        why.insert("completeness".into(), format!("description shorter than {SHORT_DESCRIPTION} characters"));
    }
    let bare = spec.parameters.iter().filter(|p| p.description.trim().is_empty()).count();
    if bare > 0 {
        scores.insert("clarity".into(), clamp(10.0 - 2.0 * bare as f64));
        why.insert("clarity".into(), format!("{bare} parameter(s) without a description"));
    }
    (scores, why)
}

fn rows(observations: &Value) -> &[Value] {
    observations.as_array().map(Vec::as_slice).unwrap_or_default()
}

fn purpose(row: &Value) -> &str {
    row["purpose"].as_str().unwrap_or_default()
}

fn is_ok(row: &Value) -> bool {
    row["status"] == "ok"
}

fn share(hits: usize, total: usize, empty: f64) -> f64 {
    if total == 0 {
        empty
    } else {
        10.0 * hits as f64 / total as f64
    }
}

/// Generated-tool scores from the spec, executed cases and static issues.
pub fn tool_scores(spec: &ToolSpec, observations: &Value, static_issues: usize) -> BTreeMap<String, f64> {
    let rows = rows(observations);
    let valid: Vec<&Value> = rows.iter().filter(|r| matches!(purpose(r), "valid" | "optional-present")).collect();
    let probes: Vec<&Value> = rows
        .iter()
        .filter(|r| matches!(purpose(r), "missing-required" | "type-mismatch" | "unknown-argument"))
        .collect();
    let validation = ["SpecInvalid", "MissingRequired", "UnknownArgument", "TypeMismatch"];
    let rejected =
        probes.iter().filter(|r| validation.contains(&r["error"]["code"].as_str().unwrap_or_default())).count();
    let covered: BTreeSet<&str> = rows
        .iter()
        .filter(|r| is_ok(r))
        .filter_map(|r| r["arguments"].as_object())
        .flat_map(|a| a.keys().map(String::as_str))
        .collect();
    let exercised = spec.parameters.iter().filter(|p| covered.contains(p.name.as_str())).count();
    let slow = rows.iter().any(|r| r["duration_ms"].as_f64().unwrap_or(0.0) > SLOW_CALL_MS);
    let maintain = 10.0 - 2.0 * static_issues as f64 - if short(spec) { 3.0 } else { 0.0 };
    [
        ("functionality", share(valid.iter().filter(|r| is_ok(r)).count(), valid.len(), 0.0)),
        ("reliability", share(rejected, probes.len(), 10.0)),
        ("maintainability", maintain),
        ("performance", if slow { 6.0 } else { 10.0 }),
        ("test-coverage", share(exercised, spec.parameters.len(), 10.0)),
    ]
    .into_iter()
    .map(|(d, s)| (d.to_string(), clamp(s)))
    .collect()
}

/// Analyzer rule: the description (as given) plus a sentence naming any
/// observed top-level return fields it does not mention yet.
pub fn described_with_fields(spec: &ToolSpec, observations: &Value) -> String {
    let lower = spec.description.to_lowercase();
    let mut fields: Vec<&str> = Vec::new();
    for r in rows(observations).iter().filter(|r| is_ok(r)) {
        for k in r["payload"].as_object().into_iter().flat_map(|m| m.keys()) {
            if !lower.contains(&k.to_lowercase()) && !fields.contains(&k.as_str()) {
                fields.push(k);
            }
        }
    }
    let base = spec.description.trim();
    if fields.is_empty() {
        return base.to_string();
    }
    let sep = if base.is_empty() || base.ends_with(['.', '!', '?']) { "" } else { "." };
    format!("{base}{sep} Returns {}.", fields.join(", ")).trim().to_string()
}

fn prompt_spec(prompt: &str) -> Option<ToolSpec> {
    spec_from_value(&prompt_json(prompt, "SPEC")?).ok()
}

fn respond(prompt: &str) -> Option<String> {
    let role = prompt_role(prompt)?;
    let reply = match role {
        "DescriptionQualityEvaluator" => {
            let (scores, rationale) = description_scores(&prompt_spec(prompt)?);
            json!({ "scores": scores, "rationale": rationale })
        }
        "ToolQualityEvaluator" => {
            let spec = prompt_spec(prompt)?;
            let obs = prompt_json(prompt, "OBSERVATIONS").unwrap_or(json!([]));
            let issues = prompt_json(prompt, "STATIC").and_then(|v| v.as_array().map(Vec::len)).unwrap_or(0);
            json!({ "scores": tool_scores(&spec, &obs, issues) })
        }
        "DescriptionAnalyzer" => {
            let spec = prompt_spec(prompt)?;
            let obs = prompt_json(prompt, "OBSERVATIONS").unwrap_or(json!([]));
            return Some(described_with_fields(&spec, &obs)).filter(|d| !d.is_empty());
        }
        "ArgumentDescriptionOptimizer" => {
            let spec = prompt_spec(prompt)?;
            let map: serde_json::Map<String, Value> = spec
                .parameters
                .iter()
                .map(|p| {
                    let d = if p.description.trim().is_empty() {
                        format!("The {} argument ({}).", p.name, p.ty.type_name())
                    } else {
                        p.description.clone()
                    };
                    (p.name.clone(), json!(d))
                })
                .collect();
            Value::Object(map)
        }
        "TestCaseGenerator" => json!({ "cases": [] }),
        _ => return None,
    };
    Some(reply.to_string())
}

/// Adds the rubric roles after any rules already on `backend`, so scripted
/// responses take precedence.
pub fn with_rubric(backend: MockBackend) -> MockBackend {
    backend.when_fn(respond)
}

pub fn rubric_backend(id: impl Into<String>) -> MockBackend {
    with_rubric(MockBackend::new(id))
}
