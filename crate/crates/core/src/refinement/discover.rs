//! Tool generation from a plain-language requirement, in four stages:
//! discovery of similar registered tools, specification, implementation
//! and evaluation, repeated with feedback until the target score.
//!
//! A generated implementation is a declarative program in the plan
//! language (calls to registered tools, parallel broadcasts, bindings and
//! pure transforms), never native code.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use super::optimizer::Termination;
use super::testgen::{rule_cases, Provenance, TestBatch};
use super::{ask, build_prompt, evaluate_quality, observations, DimensionSet, QualityReport};
use crate::agentic::{extract_json, DEFAULT_BACKEND};
use crate::caller::CallContext;
use crate::composer::{execute_plan, CompositePlan, DEFAULT_PARALLEL_WIDTH, TRANSFORMS};
use crate::error::ToolError;
use crate::finder::Strategy;
use crate::hub::Hub;
use crate::protocol::{conforms_to_return_schema, spec_from_value, validate_arguments, ToolCall, ToolResult, ToolSpec};
use crate::registry::{write_json, HandlerRef, Manifest, ManifestItem, Origin, MANIFEST_FILE};

pub const DEFAULT_TARGET: f64 = 9.0;
pub const DEFAULT_MAX_ROUNDS: usize = 3;
pub const DEFAULT_REFERENCES: usize = 5;

pub const CONFIG_FILE: &str = "config.json";
pub const IMPLEMENTATION_FILE: &str = "implementation.json";
pub const DEPENDENCIES_FILE: &str = "dependencies.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct DiscoverConfig {
    pub target: f64,
    pub max_rounds: usize,
    pub backend: String,
    pub reference_limit: usize,
    pub parallel_width: usize,
}

impl Default for DiscoverConfig {
    fn default() -> Self {
        Self {
            target: DEFAULT_TARGET,
            max_rounds: DEFAULT_MAX_ROUNDS,
            backend: DEFAULT_BACKEND.to_string(),
            reference_limit: DEFAULT_REFERENCES,
            parallel_width: DEFAULT_PARALLEL_WIDTH,
        }
    }
}

/// A generated tool ready to install or write to disk.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ToolPackage {
    pub spec: ToolSpec,
    /// Plan body: `{"steps": [...], "output": ...}`.
    pub implementation: Value,
    /// Registered tools the implementation calls, sorted.
    pub dependencies: Vec<String>,
    pub metadata: Value,
    pub quality: QualityReport,
}

impl ToolPackage {
    pub fn plan(&self) -> Result<CompositePlan, ToolError> {
        CompositePlan::body_from_value(&self.implementation, &self.spec)
    }

    pub fn accepted(&self) -> bool {
        self.metadata["accepted"] == true
    }

    /// The spec document with generation metadata and quality under
    /// `settings`, so the file loads as an ordinary spec.
    pub fn config_value(&self) -> Value {
        let mut spec = self.spec.clone();
        spec.settings.insert("generation".into(), self.metadata.clone());
        spec.settings.insert("quality".into(), self.quality.to_value());
        spec.to_value()
    }

    /// Writes `<dir>/<name>/{config.json, implementation.json,
    /// dependencies.txt}` and adds (or replaces) the tool's entry in
    /// `<dir>/manifest.json`. Returns the package directory.
    pub fn write(&self, dir: &Path) -> Result<PathBuf, ToolError> {
        let name = &self.spec.name;
        let root = dir.join(name);
        write_json(&root.join(CONFIG_FILE), &self.config_value())?;
        write_json(&root.join(IMPLEMENTATION_FILE), &self.implementation)?;
        let deps: String = self.dependencies.iter().map(|d| format!("{d}\n")).collect();
        std::fs::write(root.join(DEPENDENCIES_FILE), deps)
            .map_err(|e| ToolError::execution(format!("cannot write {}: {e}", root.display())))?;

        let manifest_path = dir.join(MANIFEST_FILE);
        let mut manifest: Manifest = match std::fs::read_to_string(&manifest_path) {
            Ok(text) => serde_json::from_str(&text)
                .map_err(|e| ToolError::spec(format!("{}: malformed manifest: {e}", manifest_path.display())))?,
            Err(_) => Manifest::default(),
        };
        let file = format!("{name}/{CONFIG_FILE}");
        manifest.tools.retain(|t| t.file != file);
        manifest.tools.push(ManifestItem {
            file,
            program: Some(format!("{name}/{IMPLEMENTATION_FILE}")),
            ..Default::default()
        });
        write_json(&manifest_path, &serde_json::to_value(&manifest).expect("manifest serializes"))?;
        Ok(root)
    }

    /// Registers the tool as a generated entry.
    pub fn install(&self, hub: &Hub) -> Result<String, ToolError> {
        let plan = self.plan()?;
        plan.check_against(hub.registry())?;
        hub.registry().register(self.spec.clone(), Origin::Generated, HandlerRef::Plan(plan))
    }
}

fn stage_error(stage: &str, e: ToolError) -> ToolError {
    ToolError::execution(format!("tool generation failed at the {stage} stage: {}", e.message))
        .with_detail(json!({ "stage": stage, "cause": e }))
}

/// Similar tools by keyword and embedding search, deduplicated and
/// limited to entries still registered.
pub async fn find_references(hub: &Hub, requirement: &str, limit: usize) -> Result<Vec<ToolSpec>, ToolError> {
    let mut names: Vec<String> = Vec::new();
    for strategy in [Strategy::Keyword, Strategy::Embedding] {
        for m in hub.find_tool(requirement, strategy, limit).await? {
            if !names.contains(&m.tool_name) {
                names.push(m.tool_name);
            }
        }
    }
    Ok(names.iter().filter_map(|n| hub.registry().spec(n)).take(limit).collect())
}

/// Problems visible without running anything.
pub fn static_issues(spec: &ToolSpec, implementation: &Value) -> Vec<String> {
    let mut issues = Vec::new();
    let text = implementation.to_string();
    let uses_input = text.contains("$input");
    for p in &spec.parameters {
        let used = text.contains(&format!("\"${}", p.name)) || text.contains(&format!("${{{}", p.name));
        if !used && !uses_input {
            issues.push(format!("parameter '{}' is never used", p.name));
        }
    }
    if matches!(spec.return_schema, crate::protocol::TypeDescriptor::Any) {
        issues.push("return schema is unconstrained".into());
    }
    if implementation.get("output").is_none() {
        issues.push("output is implicit; declare an output template".into());
    }
    issues
}

/// Runs a candidate without registering it: validation, program, return
/// schema check, as the caller would.
pub async fn run_candidate(ctx: &CallContext, plan: &CompositePlan, call: &ToolCall) -> ToolResult {
    let clock = ctx.caller().clock().clone();
    let start = clock.now();
    let outcome = async {
        let args = validate_arguments(call, &plan.spec)?;
        let run = execute_plan(plan, args, ctx).await?;
        let check = conforms_to_return_schema(&run.payload, &plan.spec.return_schema);
        if !check.conforms {
            return Err(ToolError::execution(format!(
                "payload does not match the return schema at {}: {}",
                check.mismatch_path.unwrap_or_default(),
                check.reason.unwrap_or_default()
            )));
        }
        Ok(run.payload)
    }
    .await;
    let ms = clock.now().saturating_sub(start).as_secs_f64() * 1000.0;
    ToolResult { outcome, duration_ms: ms }
}

#[derive(Clone)]
struct Candidate {
    spec: ToolSpec,
    implementation: Value,
    dependencies: Vec<String>,
    report: QualityReport,
    issues: Vec<String>,
    observations: Value,
}

const IMPLEMENTATION_TEMPLATE: &str = r#"{
  "program": {
    "steps": [
      {"call": "<registered tool>", "arguments": {"<its parameter>": "$<our parameter>"}, "as": "found"},
      {"transform": "<transform>", "input": "$found.<field>", "as": "value"}
    ],
    "output": {"<return field>": "$value"}
  },
  "dependencies": ["<registered tool>"]
}
The program is registered under the spec's name as a generated tool; its
arguments are bound as $<parameter> and the whole argument object as $input."#;

fn feedback_section(prev: Option<&Candidate>) -> Vec<(&'static str, String)> {
    let Some(c) = prev else { return Vec::new() };
    let failing: Vec<&Value> = c
        .observations
        .as_array()
        .into_iter()
        .flatten()
        .filter(|r| r["status"] == "error" && matches!(r["purpose"].as_str(), Some("valid" | "optional-present")))
        .collect();
    vec![(
        "FEEDBACK",
        json!({
            "previous_spec": c.spec,
            "previous_program": c.implementation,
            "report": c.report,
            "static_issues": c.issues,
            "failing_cases": failing,
        })
        .to_string(),
    )]
}

fn parse_spec(text: &str, hub: &Hub) -> Result<ToolSpec, String> {
    let v = extract_json(text).ok_or("output is not JSON")?;
    let v = v.get("spec").cloned().unwrap_or(v);
    let spec = spec_from_value(&v).map_err(|e| e.to_string())?;
    spec.validate().map_err(|e| e.to_string())?;
    if hub.registry().contains(&spec.name) {
        return Err(format!("a tool named '{}' already exists; choose another name", spec.name));
    }
    Ok(spec)
}

fn parse_implementation(text: &str, spec: &ToolSpec, hub: &Hub) -> Result<(Value, Vec<String>), String> {
    let v = extract_json(text).ok_or("output is not JSON")?;
    let program = v.get("program").cloned().unwrap_or_else(|| v.clone());
    let plan = CompositePlan::body_from_value(&program, spec).map_err(|e| e.to_string())?;
    plan.check_against(hub.registry()).map_err(|e| e.to_string())?;
    let mut deps: BTreeSet<String> = plan.referenced_tools();
    if let Some(declared) = v.get("dependencies").and_then(Value::as_array) {
        deps.extend(declared.iter().filter_map(Value::as_str).map(str::to_string));
    }
    Ok((plan.body_to_value(), deps.into_iter().collect()))
}

/// Generates a tool for `requirement`. The best candidate is returned even
/// below target; `metadata.accepted` records whether it reached it.
pub async fn discover_tool(hub: &Hub, requirement: &str, config: &DiscoverConfig) -> Result<ToolPackage, ToolError> {
    if config.max_rounds == 0 {
        return Err(ToolError::spec("max_rounds must be at least 1"));
    }
    if requirement.trim().is_empty() {
        return Err(ToolError::spec("the requirement is empty"));
    }
    let backends = hub.backends();
    let ctx = hub.caller().context();
    let references =
        find_references(hub, requirement, config.reference_limit).await.map_err(|e| stage_error("discovery", e))?;
    let reference_values: Vec<Value> = references.iter().map(ToolSpec::to_value).collect();
    let reference_names: Vec<&str> = references.iter().map(|s| s.name.as_str()).collect();

    let mut best: Option<Candidate> = None;
    let mut last: Option<Candidate> = None;
    let mut reports: Vec<QualityReport> = Vec::new();
    let mut terminated_by = Termination::MaxRounds;
    for round in 1..=config.max_rounds {
        let feedback = feedback_section(last.as_ref());

        let mut sections =
            vec![("REQUEST", requirement.to_string()), ("REFERENCES", json!(reference_values).to_string())];
        sections.extend(feedback.clone());
        let prompt = build_prompt(
            "SpecificationGenerator",
            "Write a complete tool specification for the request, following the conventions of the reference \
             tools: name, description, parameters with types and descriptions, return schema and tags. \
             Respond with the spec as JSON.",
            &sections,
        );
        let spec = ask(backends, &config.backend, &prompt, |t| parse_spec(t, hub))
            .await
            .map_err(|e| stage_error("specification", e))?;

        let available: Vec<String> = hub.registry().entries().iter().map(|e| e.spec.name.clone()).collect();
        let mut sections = vec![
            ("SPEC", spec.to_json()),
            ("TEMPLATE", IMPLEMENTATION_TEMPLATE.to_string()),
            ("AVAILABLE_TOOLS", json!(available).to_string()),
            ("TRANSFORMS", json!(TRANSFORMS).to_string()),
        ];
        sections.extend(feedback);
        let prompt = build_prompt(
            "ImplementationGenerator",
            "Implement the tool as a declarative program following the template. Call only available tools.",
            &sections,
        );
        let (implementation, dependencies) =
            ask(backends, &config.backend, &prompt, |t| parse_implementation(t, &spec, hub))
                .await
                .map_err(|e| stage_error("implementation", e))?;

        let plan =
            CompositePlan::body_from_value(&implementation, &spec).map_err(|e| stage_error("implementation", e))?;
        let issues = static_issues(&spec, &implementation);
        let provenance = if round == 1 { Provenance::Initial } else { Provenance::Feedback { round } };
        let mut batch: TestBatch = rule_cases(&spec, last.as_ref().map(|c| &c.report), provenance);
        let results = futures::future::join_all(batch.cases.iter().map(|c| run_candidate(&ctx, &plan, &c.call))).await;
        let obs = observations(&batch.cases, &results);
        batch.results = Some(results);
        let report = evaluate_quality(
            backends,
            &config.backend,
            DimensionSet::Discover,
            vec![
                ("SPEC", spec.to_json()),
                ("PROGRAM", implementation.to_string()),
                ("STATIC", json!(issues).to_string()),
                ("OBSERVATIONS", obs.to_string()),
            ],
            round,
        )
        .await
        .map_err(|e| stage_error("evaluation", e))?;

        reports.push(report.clone());
        let candidate = Candidate { spec, implementation, dependencies, report, issues, observations: obs };
        let reached = candidate.report.overall >= config.target;
        if best.as_ref().is_none_or(|b| candidate.report.overall > b.report.overall) {
            best = Some(candidate.clone());
        }
        last = Some(candidate);
        if reached {
            terminated_by = Termination::Threshold;
            break;
        }
    }
    let best = best.expect("at least one round ran");
    let metadata = json!({
        "requirement": requirement,
        "references": reference_names,
        "backend": config.backend,
        "rounds_used": reports.len(),
        "best_round": best.report.round,
        "terminated_by": terminated_by,
        "target": config.target,
        "accepted": best.report.overall >= config.target,
        "static_issues": best.issues,
        "reports": reports,
    });
    Ok(ToolPackage {
        spec: best.spec,
        implementation: best.implementation,
        dependencies: best.dependencies,
        metadata,
        quality: best.report,
    })
}
