//! Multi-round description optimization against observed behaviour.
//!
//! Each round: generate cases (feedback-driven after the first), execute
//! them through the caller, propose a tool description, propose parameter
//! descriptions, score the candidate. The loop stops at the threshold or
//! after `max_rounds`, and returns the best-scoring candidate seen.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::testgen::{generate_test_cases, TestBatch};
use super::{
    ask, build_prompt, evaluate_quality, normalize_sentence, observations, remove_sentences, sentences, DimensionSet,
    QualityReport,
};
use crate::agentic::{extract_json, Backends, DEFAULT_BACKEND};
use crate::composer::DEFAULT_PARALLEL_WIDTH;
use crate::error::ToolError;
use crate::hub::Hub;
use crate::protocol::ToolSpec;

pub const DEFAULT_THRESHOLD: f64 = 8.0;
pub const DEFAULT_MAX_ROUNDS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeConfig {
    pub threshold: f64,
    pub max_rounds: usize,
    pub backend: String,
    pub parallel_width: usize,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            max_rounds: DEFAULT_MAX_ROUNDS,
            backend: DEFAULT_BACKEND.to_string(),
            parallel_width: DEFAULT_PARALLEL_WIDTH,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    Threshold,
    MaxRounds,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptimizationOutcome {
    pub original: ToolSpec,
    pub optimized: ToolSpec,
    pub rounds_used: usize,
    /// One report per round, in order.
    pub reports: Vec<QualityReport>,
    pub terminated_by: Termination,
    /// Round whose candidate was returned.
    pub best_round: usize,
    /// Set when every execution in some round failed, so descriptions were
    /// proposed without a single successful observation.
    pub low_confidence: bool,
}

impl OptimizationOutcome {
    pub fn best_report(&self) -> &QualityReport {
        &self.reports[self.best_round - 1]
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("outcome serializes")
    }
}

/// Output of the description analyzer.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DescriptionProposal {
    pub text: String,
    /// No execution in the batch succeeded.
    pub low_confidence: bool,
}

fn executed(batch: &TestBatch) -> Result<&[crate::protocol::ToolResult], ToolError> {
    match &batch.results {
        Some(r) if !r.is_empty() => Ok(r),
        _ => Err(ToolError::execution("the test batch has not been executed")),
    }
}

fn plain_text(text: &str) -> Result<String, String> {
    let mut t = text.trim();
    if let Some(inner) = t.strip_prefix("```") {
        t = inner.split_once('\n').map_or("", |(_, body)| body);
        t = t.trim_end().strip_suffix("```").unwrap_or(t).trim();
    }
    let described = t
        .starts_with('{')
        .then(|| extract_json(t))
        .flatten()
        .and_then(|v| v.get("description")?.as_str().map(str::to_string));
    let t = described.as_deref().unwrap_or(t).trim_matches('"').trim();
    if t.is_empty() {
        return Err("the proposed description is empty".into());
    }
    Ok(t.to_string())
}

/// Drops repeated sentences, keeping first occurrences.
fn dedupe_sentences(text: &str) -> String {
    let mut seen = BTreeSet::new();
    sentences(text).into_iter().filter(|s| seen.insert(normalize_sentence(s))).collect::<Vec<_>>().join(" ")
}

/// Proposes a tool description grounded in the executed batch.
pub async fn analyze_description(
    backends: &Backends,
    backend: &str,
    spec: &ToolSpec,
    batch: &TestBatch,
) -> Result<DescriptionProposal, ToolError> {
    let results = executed(batch)?;
    let prompt = build_prompt(
        "DescriptionAnalyzer",
        "Compare the tool description with the observed executions and write a revised description that \
         matches the actual behaviour. Respond with the description as plain text.",
        &[("SPEC", spec.to_json()), ("OBSERVATIONS", observations(&batch.cases, results).to_string())],
    );
    let text = ask(backends, backend, &prompt, plain_text).await?;
    Ok(DescriptionProposal {
        text: dedupe_sentences(&text),
        low_confidence: results.iter().all(|r| r.outcome.is_err()),
    })
}

fn parse_param_map(text: &str) -> Result<BTreeMap<String, String>, String> {
    let v = extract_json(text).ok_or("output is not JSON")?;
    let map = v.get("parameters").unwrap_or(&v).as_object().ok_or("expected an object of descriptions")?;
    map.iter()
        .map(|(k, d)| {
            d.as_str().map(|s| (k.clone(), s.trim().to_string())).ok_or(format!("description of '{k}' is not text"))
        })
        .collect()
}

/// Per-parameter descriptions keyed by name. Sentences shared with
/// `tool_description` are removed; a parameter left without text gets a
/// generated one.
pub async fn optimize_argument_descriptions(
    backends: &Backends,
    backend: &str,
    spec: &ToolSpec,
    tool_description: &str,
    batch: &TestBatch,
) -> Result<BTreeMap<String, String>, ToolError> {
    let results = executed(batch)?;
    if spec.parameters.is_empty() {
        return Ok(BTreeMap::new());
    }
    let prompt = build_prompt(
        "ArgumentDescriptionOptimizer",
        "Rewrite each parameter description so it matches how the argument is actually used, without \
         repeating sentences from the tool description. Respond with JSON mapping parameter name to description.",
        &[
            ("SPEC", spec.to_json()),
            ("PROPOSED_DESCRIPTION", tool_description.to_string()),
            ("OBSERVATIONS", observations(&batch.cases, results).to_string()),
        ],
    );
    let proposed = ask(backends, backend, &prompt, parse_param_map).await?;
    let banned: BTreeSet<String> = sentences(tool_description).iter().map(|s| normalize_sentence(s)).collect();
    Ok(spec
        .parameters
        .iter()
        .map(|p| {
            let text = proposed.get(&p.name).filter(|d| !d.is_empty()).unwrap_or(&p.description);
            let mut text = remove_sentences(&dedupe_sentences(text), &banned);
            if text.is_empty() {
                text = format!("The {} argument ({}).", p.name, p.ty.type_name());
                if banned.contains(&normalize_sentence(&text)) {
                    text = format!("{} ({})", p.name, p.ty.type_name());
                }
            }
            (p.name.clone(), text)
        })
        .collect())
}

struct Progress {
    reports: Vec<QualityReport>,
    best: Option<(ToolSpec, usize)>,
    low_confidence: bool,
}

impl Progress {
    fn outcome(&self, original: &ToolSpec, terminated_by: Termination) -> OptimizationOutcome {
        let (optimized, best_round) = self.best.clone().unwrap_or_else(|| (original.clone(), 0));
        OptimizationOutcome {
            original: original.clone(),
            optimized,
            rounds_used: self.reports.len(),
            reports: self.reports.clone(),
            terminated_by,
            best_round,
            low_confidence: self.low_confidence,
        }
    }
}

/// Optimizes the registered tool `name`. The registry is left unchanged;
/// the caller decides whether to adopt `optimized`.
pub async fn optimize_tool(hub: &Hub, name: &str, config: &OptimizeConfig) -> Result<OptimizationOutcome, ToolError> {
    if config.max_rounds == 0 {
        return Err(ToolError::spec("max_rounds must be at least 1"));
    }
    if !config.threshold.is_finite() {
        return Err(ToolError::spec("threshold must be a finite number"));
    }
    let original = hub
        .registry()
        .spec(name)
        .ok_or_else(|| ToolError::not_found(format!("no tool named '{name}' is registered")))?;
    let backends = hub.backends();
    let ctx = hub.caller().context();
    let mut progress = Progress { reports: Vec::new(), best: None, low_confidence: false };
    for round in 1..=config.max_rounds {
        let base = progress.best.as_ref().map_or(&original, |(s, _)| s).clone();
        let step = async {
            let mut batch =
                generate_test_cases(backends, &config.backend, &base, progress.reports.last(), round).await?;
            batch.execute(&ctx, config.parallel_width).await;
            let proposal = analyze_description(backends, &config.backend, &base, &batch).await?;
            let params =
                optimize_argument_descriptions(backends, &config.backend, &base, &proposal.text, &batch).await?;
            let mut candidate = base.clone();
            candidate.description = proposal.text.clone();
            for p in &mut candidate.parameters {
                if let Some(d) = params.get(&p.name) {
                    p.description = d.clone();
                }
            }
            candidate.validate()?;
            let obs = observations(&batch.cases, batch.results.as_deref().unwrap_or_default());
            let report = evaluate_quality(
                backends,
                &config.backend,
                DimensionSet::Optimizer,
                vec![("SPEC", candidate.to_json()), ("OBSERVATIONS", obs.to_string())],
                round,
            )
            .await?;
            Ok::<_, ToolError>((candidate, report, proposal.low_confidence))
        };
        let (candidate, report, low_confidence) = match step.await {
            Ok(r) => r,
            Err(e) => {
                let partial = progress.outcome(&original, Termination::MaxRounds);
                return Err(ToolError::execution(format!(
                    "optimizing '{name}' failed in round {round}: {}",
                    e.message
                ))
                .with_detail(json!({ "round": round, "cause": e, "partial": partial.to_value() })));
            }
        };
        progress.low_confidence |= low_confidence;
        let improves = progress.best.as_ref().is_none_or(|(_, r)| report.overall > progress.reports[r - 1].overall);
        if improves {
            progress.best = Some((candidate, round));
        }
        let reached = report.overall >= config.threshold;
        progress.reports.push(report);
        if reached {
            return Ok(progress.outcome(&original, Termination::Threshold));
        }
    }
    Ok(progress.outcome(&original, Termination::MaxRounds))
}
