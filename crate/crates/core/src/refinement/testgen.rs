//! Test batches: rule-based coverage of a spec's interface, plus
//! agent-proposed cases aimed at dimensions flagged by earlier feedback.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::{ask, build_prompt, QualityReport};
use crate::agentic::{extract_json, Backends};
use crate::caller::CallContext;
use crate::composer::execute_parallel;
use crate::error::ToolError;
use crate::protocol::{ParamType, ParameterSpec, ToolCall, ToolResult, ToolSpec};

/// Scores under this mark are treated as flagged by the feedback rules.
pub const FLAG_BELOW: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CasePurpose {
    /// Every required argument, no optional ones.
    Valid,
    /// Required arguments plus optional ones.
    OptionalPresent,
    MissingRequired,
    TypeMismatch,
    UnknownArgument,
    /// Numeric edge values (zero, negative).
    Boundary,
    /// Proposed by the agent; no fixed expectation.
    Agent,
}

impl CasePurpose {
    pub fn expects_success(self) -> bool {
        matches!(self, CasePurpose::Valid | CasePurpose::OptionalPresent)
    }

    pub fn is_probe(self) -> bool {
        matches!(self, CasePurpose::MissingRequired | CasePurpose::TypeMismatch | CasePurpose::UnknownArgument)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestCase {
    pub call: ToolCall,
    pub purpose: CasePurpose,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Provenance {
    Initial,
    Feedback { round: usize },
}

/// Cases for one tool, deduplicated by canonical serialized form.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestBatch {
    pub tool: String,
    pub cases: Vec<TestCase>,
    pub provenance: Provenance,
    #[serde(skip_serializing_if = "Option::is_none", serialize_with = "serialize_results")]
    pub results: Option<Vec<ToolResult>>,
}

fn serialize_results<S: serde::Serializer>(r: &Option<Vec<ToolResult>>, s: S) -> Result<S::Ok, S::Error> {
    let values: Vec<Value> = r.iter().flatten().map(ToolResult::to_value).collect();
    values.serialize(s)
}

/// JSON text with object keys sorted at every level.
pub fn canonical_json(v: &Value) -> String {
    fn sorted(v: &Value) -> Value {
        match v {
            Value::Object(m) => {
                let mut keys: Vec<&String> = m.keys().collect();
                keys.sort();
                Value::Object(keys.into_iter().map(|k| (k.clone(), sorted(&m[k]))).collect())
            }
            Value::Array(a) => Value::Array(a.iter().map(sorted).collect()),
            other => other.clone(),
        }
    }
    sorted(v).to_string()
}

impl TestBatch {
    fn new(tool: &str, provenance: Provenance) -> Self {
        Self { tool: tool.to_string(), cases: Vec::new(), provenance, results: None }
    }

    /// Adds the case unless an identical call is already present.
    pub fn push(&mut self, arguments: Map<String, Value>, purpose: CasePurpose) -> bool {
        let call = ToolCall { name: self.tool.clone(), arguments };
        let key = canonical_json(&Value::Object(call.arguments.clone()));
        if self.cases.iter().any(|c| canonical_json(&Value::Object(c.call.arguments.clone())) == key) {
            return false;
        }
        self.cases.push(TestCase { call, purpose });
        true
    }

    pub fn calls(&self) -> Vec<ToolCall> {
        self.cases.iter().map(|c| c.call.clone()).collect()
    }

    /// Runs every case through the caller; results keep case order.
    pub async fn execute(&mut self, ctx: &CallContext, width: usize) {
        self.results = Some(execute_parallel(ctx, self.calls(), width).await);
    }
}

/// A plausible value: the example named in the description ("such as X",
/// "e.g. X") for strings, otherwise a fixed value of the right type.
pub fn sample_value(param: &ParameterSpec) -> Value {
    sample_of(&param.ty, &param.description)
}

fn sample_of(ty: &ParamType, description: &str) -> Value {
    match ty {
        ParamType::String => json!(example_in(description).unwrap_or_else(|| "example".into())),
        ParamType::Integer => json!(1),
        ParamType::Number => json!(1.5),
        ParamType::Boolean => json!(true),
        ParamType::Array(items) => json!([sample_of(items, "")]),
        ParamType::Object => json!({}),
    }
}

fn example_in(description: &str) -> Option<String> {
    let lower = description.to_lowercase();
    let at = ["such as ", "e.g. ", "e.g., ", "for example "].iter().find_map(|m| lower.find(m).map(|i| i + m.len()))?;
    let word: String =
        description[at..].chars().take_while(|c| !c.is_whitespace() && *c != ',' && *c != ';' && *c != ')').collect();
    let word = word.trim_end_matches(['.', ':']).trim_matches(['"', '\'']);
    (!word.is_empty()).then(|| word.to_string())
}

/// A value the validator must reject for this type.
pub fn wrong_value(ty: &ParamType) -> Value {
    match ty {
        ParamType::String => json!(12345),
        ParamType::Integer | ParamType::Number => json!("not-a-number"),
        ParamType::Boolean => json!("yes"),
        ParamType::Array(_) => json!("not-a-list"),
        ParamType::Object => json!("not-an-object"),
    }
}

fn required_args(spec: &ToolSpec) -> Map<String, Value> {
    spec.parameters.iter().filter(|p| p.required).map(|p| (p.name.clone(), sample_value(p))).collect()
}

/// The deterministic part of a batch:
/// - one valid call with the required arguments,
/// - one call per optional parameter with it present,
/// - one missing-required probe per required parameter,
/// - one type-mismatch probe per distinct parameter type,
/// - one unknown-argument probe.
///
/// Feedback adds zero and negative values for numeric parameters when
/// accuracy is flagged, and an all-arguments call when completeness is.
pub fn rule_cases(spec: &ToolSpec, feedback: Option<&QualityReport>, provenance: Provenance) -> TestBatch {
    let mut batch = TestBatch::new(&spec.name, provenance);
    let base = required_args(spec);
    batch.push(base.clone(), CasePurpose::Valid);
    for p in spec.parameters.iter().filter(|p| !p.required) {
        let mut args = base.clone();
        args.insert(p.name.clone(), sample_value(p));
        batch.push(args, CasePurpose::OptionalPresent);
    }
    for p in spec.parameters.iter().filter(|p| p.required) {
        let mut args = base.clone();
        args.remove(&p.name);
        batch.push(args, CasePurpose::MissingRequired);
    }
    let mut seen = BTreeSet::new();
    for p in &spec.parameters {
        if seen.insert(p.ty.type_name()) {
            let mut args = base.clone();
            args.insert(p.name.clone(), wrong_value(&p.ty));
            batch.push(args, CasePurpose::TypeMismatch);
        }
    }
    let mut unknown = base.clone();
    let mut key = "unexpected_argument".to_string();
    while spec.parameter(&key).is_some() {
        key.push('_');
    }
    unknown.insert(key, json!(true));
    batch.push(unknown, CasePurpose::UnknownArgument);

    if let Some(report) = feedback {
        let flagged = report.flagged(FLAG_BELOW);
        if flagged.contains(&"accuracy") {
            for p in &spec.parameters {
                let edges = match p.ty {
                    ParamType::Integer => [json!(0), json!(-1)],
                    ParamType::Number => [json!(0.0), json!(-1.0)],
                    _ => continue,
                };
                for v in edges {
                    let mut args = base.clone();
                    args.insert(p.name.clone(), v);
                    batch.push(args, CasePurpose::Boundary);
                }
            }
        }
        if flagged.contains(&"completeness") {
            let all = spec.parameters.iter().map(|p| (p.name.clone(), sample_value(p))).collect();
            batch.push(all, CasePurpose::OptionalPresent);
        }
    }
    batch
}

fn parse_agent_cases(text: &str) -> Result<Vec<Map<String, Value>>, String> {
    let v = extract_json(text).ok_or("output is not JSON")?;
    let cases = v.get("cases").and_then(Value::as_array).ok_or("expected {\"cases\": [...]}")?;
    cases
        .iter()
        .map(|c| match c.get("arguments") {
            Some(Value::Object(a)) => Ok(a.clone()),
            Some(_) => Err("case 'arguments' must be an object".to_string()),
            None => c.as_object().cloned().ok_or_else(|| "each case must be an object".to_string()),
        })
        .collect()
}

/// Rule-based cases, plus agent-proposed ones when feedback flags any
/// dimension. Only the agent step can fail.
pub async fn generate_test_cases(
    backends: &Backends,
    backend: &str,
    spec: &ToolSpec,
    feedback: Option<&QualityReport>,
    round: usize,
) -> Result<TestBatch, ToolError> {
    spec.validate()?;
    let provenance = match feedback {
        None => Provenance::Initial,
        Some(_) => Provenance::Feedback { round },
    };
    let mut batch = rule_cases(spec, feedback, provenance);
    let Some(report) = feedback else {
        return Ok(batch);
    };
    let flagged = report.flagged(FLAG_BELOW);
    if flagged.is_empty() {
        return Ok(batch);
    }
    let existing: Vec<&Map<String, Value>> = batch.cases.iter().map(|c| &c.call.arguments).collect();
    let prompt = build_prompt(
        "TestCaseGenerator",
        "Propose additional test calls for this tool that probe the flagged quality dimensions. \
         Respond with JSON: {\"cases\": [{\"arguments\": {...}}]}.",
        &[
            ("SPEC", spec.to_json()),
            ("FEEDBACK", json!({ "flagged": flagged, "report": report }).to_string()),
            ("EXISTING", json!(existing).to_string()),
        ],
    );
    for args in ask(backends, backend, &prompt, parse_agent_cases).await? {
        batch.push(args, CasePurpose::Agent);
    }
    Ok(batch)
}
