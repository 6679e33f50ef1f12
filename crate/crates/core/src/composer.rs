//! Composite tools: declarative plans of calls, parallel broadcasts,
//! agent-driven loops, bindings and pure transforms.
//!
//! Serialized body:
//!
//! ```json
//! {"steps": [
//!    {"call": "string_stats", "arguments": {"text": "$text"}},
//!    {"bind": {"path": ".length", "var": "n"}},
//!    {"call": "range_check", "arguments": {"value": "$n", "min": 0, "max": 10}, "as": "check"},
//!    {"parallel": [{"call": "a", "arguments": {}}, {"call": "b", "arguments": {}}], "as": "both"},
//!    {"loop": {"prompt": "Refine {text}", "max_iterations": 3, "tools": ["echo"]}, "as": "refined"},
//!    {"transform": "upper", "input": "$text", "as": "shout"}
//!  ],
//!  "output": {"check": "$check", "shout": "$shout"}}
//! ```
//!
//! Templates: a string that is exactly `$var.path[0]` is replaced by the
//! referenced value; `${var.path}` inside a longer string interpolates its
//! text; `$$` escapes a literal dollar. `$last` is the previous step's value
//! and `$input` the composite's argument object.

use std::collections::BTreeSet;
use std::sync::{Arc, OnceLock};

use async_trait::async_trait;
use futures::stream::{self, StreamExt};
use regex::Regex;
use serde_json::{json, Map, Value};

use crate::agentic::{extract_json, retry_prompt, GenerationSettings, DEFAULT_BACKEND};
use crate::caller::CallContext;
use crate::error::ToolError;
use crate::handler::ToolHandler;
use crate::protocol::{call_from_value, spec_from_value, Arguments, ToolCall, ToolResult, ToolSpec};
use crate::registry::{HandlerRef, Origin, Registry};

pub const DEFAULT_PARALLEL_WIDTH: usize = 8;
/// Distinguished call name that ends an agent loop.
pub const STOP_CALL: &str = "__stop__";

#[derive(Debug, Clone, PartialEq)]
pub struct CallStep {
    pub tool: String,
    pub arguments: Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopSpec {
    /// Rendered with `{var}` placeholders over the plan's variables.
    pub prompt: String,
    pub backend: String,
    pub max_iterations: usize,
    /// Tools the agent may call; empty means any registered tool.
    pub tools: Vec<String>,
    /// Steps run after each agent call, with `$last` bound to its payload.
    pub body: Vec<Step>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepKind {
    Call(CallStep),
    Parallel { calls: Vec<CallStep>, width: usize },
    LoopUntil(LoopSpec),
    Bind { path: String, var: String },
    Transform { op: String, input: Value, options: Map<String, Value> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub kind: StepKind,
    /// Variable receiving the step's value.
    pub bind_as: Option<String>,
}

impl Step {
    pub fn call(tool: impl Into<String>, arguments: Value) -> Self {
        Self { kind: StepKind::Call(CallStep { tool: tool.into(), arguments }), bind_as: None }
    }

    pub fn parallel(calls: Vec<(String, Value)>) -> Self {
        Self {
            kind: StepKind::Parallel {
                calls: calls.into_iter().map(|(tool, arguments)| CallStep { tool, arguments }).collect(),
                width: DEFAULT_PARALLEL_WIDTH,
            },
            bind_as: None,
        }
    }

    pub fn bind(path: impl Into<String>, var: impl Into<String>) -> Self {
        Self { kind: StepKind::Bind { path: path.into(), var: var.into() }, bind_as: None }
    }

    pub fn looped(spec: LoopSpec) -> Self {
        Self { kind: StepKind::LoopUntil(spec), bind_as: None }
    }

    pub fn transform(op: impl Into<String>, input: Value) -> Self {
        Self { kind: StepKind::Transform { op: op.into(), input, options: Map::new() }, bind_as: None }
    }

    pub fn bind_as(mut self, var: impl Into<String>) -> Self {
        self.bind_as = Some(var.into());
        self
    }
}

/// A composite tool: its own interface plus the program implementing it.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositePlan {
    pub spec: ToolSpec,
    pub steps: Vec<Step>,
    /// Output template; defaults to the last step's value.
    pub output: Option<Value>,
}

fn err_at(path: impl Into<String>, msg: impl Into<String>) -> ToolError {
    ToolError::spec_at(path, msg)
}

fn parse_call_step(v: &Map<String, Value>, path: &str) -> Result<CallStep, ToolError> {
    let tool = v
        .get("call")
        .and_then(Value::as_str)
        .ok_or_else(|| err_at(format!("{path}.call"), "call step needs a tool name"))?;
    let arguments = v.get("arguments").cloned().unwrap_or_else(|| json!({}));
    if !arguments.is_object() {
        return Err(err_at(format!("{path}.arguments"), "arguments template must be an object"));
    }
    Ok(CallStep { tool: tool.to_string(), arguments })
}

fn call_step_value(c: &CallStep) -> Value {
    json!({ "call": c.tool, "arguments": c.arguments })
}

fn parse_steps(value: &Value, path: &str) -> Result<Vec<Step>, ToolError> {
    let Value::Array(items) = value else {
        return Err(err_at(path, "steps must be a list"));
    };
    items.iter().enumerate().map(|(i, item)| parse_step(item, &format!("{path}[{i}]"))).collect()
}

fn parse_step(value: &Value, path: &str) -> Result<Step, ToolError> {
    let Value::Object(m) = value else {
        return Err(err_at(path, "step must be an object"));
    };
    let bind_as = match m.get("as") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(_) => return Err(err_at(format!("{path}.as"), "'as' must be a variable name")),
    };
    let kind = if m.contains_key("call") {
        StepKind::Call(parse_call_step(m, path)?)
    } else if let Some(p) = m.get("parallel") {
        let Value::Array(calls) = p else {
            return Err(err_at(format!("{path}.parallel"), "parallel must be a list of calls"));
        };
        if calls.is_empty() {
            return Err(err_at(format!("{path}.parallel"), "parallel needs at least one call"));
        }
        let calls = calls
            .iter()
            .enumerate()
            .map(|(j, c)| {
                let cp = format!("{path}.parallel[{j}]");
                c.as_object()
                    .ok_or_else(|| err_at(&cp, "parallel branch must be a call object"))
                    .and_then(|m| parse_call_step(m, &cp))
            })
            .collect::<Result<_, _>>()?;
        let width = match m.get("width") {
            None => DEFAULT_PARALLEL_WIDTH,
            Some(w) => w
                .as_u64()
                .filter(|w| *w >= 1)
                .ok_or_else(|| err_at(format!("{path}.width"), "width must be a positive integer"))?
                as usize,
        };
        StepKind::Parallel { calls, width }
    } else if let Some(l) = m.get("loop") {
        let lp = format!("{path}.loop");
        let Value::Object(lm) = l else {
            return Err(err_at(lp, "loop must be an object"));
        };
        let prompt = lm
            .get("prompt")
            .and_then(Value::as_str)
            .ok_or_else(|| err_at(format!("{lp}.prompt"), "loop needs a prompt"))?
            .to_string();
        let max_iterations = lm
            .get("max_iterations")
            .and_then(Value::as_u64)
            .ok_or_else(|| err_at(format!("{lp}.max_iterations"), "loop needs max_iterations"))?;
        if max_iterations < 1 {
            return Err(err_at(format!("{lp}.max_iterations"), "max_iterations must be at least 1"));
        }
        let tools = match lm.get("tools") {
            None => Vec::new(),
            Some(Value::Array(ts)) => ts
                .iter()
                .map(|t| {
                    t.as_str().map(str::to_string).ok_or_else(|| err_at(format!("{lp}.tools"), "tools must be names"))
                })
                .collect::<Result<_, _>>()?,
            Some(_) => return Err(err_at(format!("{lp}.tools"), "tools must be a list")),
        };
        let body = match lm.get("body") {
            None => Vec::new(),
            Some(b) => parse_steps(b, &format!("{lp}.body"))?,
        };
        StepKind::LoopUntil(LoopSpec {
            prompt,
            backend: lm.get("backend").and_then(Value::as_str).unwrap_or(DEFAULT_BACKEND).to_string(),
            max_iterations: max_iterations as usize,
            tools,
            body,
        })
    } else if let Some(b) = m.get("bind") {
        let bp = format!("{path}.bind");
        let path_expr =
            b.get("path").and_then(Value::as_str).ok_or_else(|| err_at(format!("{bp}.path"), "bind needs a path"))?;
        let var = b
            .get("var")
            .and_then(Value::as_str)
            .ok_or_else(|| err_at(format!("{bp}.var"), "bind needs a variable name"))?;
        StepKind::Bind { path: path_expr.to_string(), var: var.to_string() }
    } else if let Some(op) = m.get("transform") {
        let op = op.as_str().ok_or_else(|| err_at(format!("{path}.transform"), "transform must name an operation"))?;
        if !TRANSFORMS.contains(&op) {
            return Err(err_at(
                format!("{path}.transform"),
                format!("unknown transform '{op}' (known: {})", TRANSFORMS.join(", ")),
            ));
        }
        let mut options = m.clone();
        for k in ["transform", "input", "as"] {
            options.remove(k);
        }
        StepKind::Transform { op: op.to_string(), input: m.get("input").cloned().unwrap_or(Value::Null), options }
    } else {
        return Err(err_at(path, "step must be one of call, parallel, loop, bind, transform"));
    };
    Ok(Step { kind, bind_as })
}

fn step_value(step: &Step) -> Value {
    let mut m = match &step.kind {
        StepKind::Call(c) => call_step_value(c).as_object().cloned().unwrap_or_default(),
        StepKind::Parallel { calls, width } => {
            let mut m = Map::new();
            m.insert("parallel".into(), Value::Array(calls.iter().map(call_step_value).collect()));
            if *width != DEFAULT_PARALLEL_WIDTH {
                m.insert("width".into(), json!(width));
            }
            m
        }
        StepKind::LoopUntil(l) => {
            let mut lm = Map::new();
            lm.insert("prompt".into(), json!(l.prompt));
            lm.insert("backend".into(), json!(l.backend));
            lm.insert("max_iterations".into(), json!(l.max_iterations));
            if !l.tools.is_empty() {
                lm.insert("tools".into(), json!(l.tools));
            }
            if !l.body.is_empty() {
                lm.insert("body".into(), Value::Array(l.body.iter().map(step_value).collect()));
            }
            let mut m = Map::new();
            m.insert("loop".into(), Value::Object(lm));
            m
        }
        StepKind::Bind { path, var } => {
            let mut m = Map::new();
            m.insert("bind".into(), json!({ "path": path, "var": var }));
            m
        }
        StepKind::Transform { op, input, options } => {
            let mut m = Map::new();
            m.insert("transform".into(), json!(op));
            m.insert("input".into(), input.clone());
            for (k, v) in options {
                m.insert(k.clone(), v.clone());
            }
            m
        }
    };
    if let Some(v) = &step.bind_as {
        m.insert("as".into(), json!(v));
    }
    Value::Object(m)
}

impl CompositePlan {
    pub fn new(spec: ToolSpec, steps: Vec<Step>) -> Self {
        Self { spec, steps, output: None }
    }

    pub fn with_output(mut self, output: Value) -> Self {
        self.output = Some(output);
        self
    }

    /// Parses a body document (`steps` and optional `output`) for `spec`.
    pub fn body_from_value(value: &Value, spec: &ToolSpec) -> Result<Self, ToolError> {
        let Value::Object(m) = value else {
            return Err(err_at("$", "plan body must be an object"));
        };
        let steps = parse_steps(m.get("steps").unwrap_or(&Value::Null), "steps")?;
        if steps.is_empty() {
            return Err(err_at("steps", "a plan needs at least one step"));
        }
        let plan = Self { spec: spec.clone(), steps, output: m.get("output").cloned() };
        plan.check_bindings()?;
        Ok(plan)
    }

    pub fn body_to_value(&self) -> Value {
        let mut m = Map::new();
        m.insert("steps".into(), Value::Array(self.steps.iter().map(step_value).collect()));
        if let Some(o) = &self.output {
            m.insert("output".into(), o.clone());
        }
        Value::Object(m)
    }

    /// Parses a full plan document: spec fields plus `steps`/`output`.
    pub fn from_value(value: &Value) -> Result<Self, ToolError> {
        let Value::Object(m) = value else {
            return Err(err_at("$", "plan must be an object"));
        };
        let mut spec_doc = m.clone();
        let mut body = Map::new();
        for k in ["steps", "output"] {
            if let Some(v) = spec_doc.remove(k) {
                body.insert(k.into(), v);
            }
        }
        let spec = spec_from_value(&Value::Object(spec_doc))?;
        Self::body_from_value(&Value::Object(body), &spec)
    }

    pub fn from_json(text: &str) -> Result<Self, ToolError> {
        let v: Value = serde_json::from_str(text).map_err(|e| err_at("$", format!("plan is not valid JSON: {e}")))?;
        Self::from_value(&v)
    }

    pub fn to_value(&self) -> Value {
        let mut m = self.spec.to_value().as_object().cloned().unwrap_or_default();
        if let Value::Object(b) = self.body_to_value() {
            m.extend(b);
        }
        Value::Object(m)
    }

    /// Every tool the plan names, including loop allow-lists.
    pub fn referenced_tools(&self) -> BTreeSet<String> {
        fn walk(steps: &[Step], out: &mut BTreeSet<String>) {
            for s in steps {
                match &s.kind {
                    StepKind::Call(c) => {
                        out.insert(c.tool.clone());
                    }
                    StepKind::Parallel { calls, .. } => out.extend(calls.iter().map(|c| c.tool.clone())),
                    StepKind::LoopUntil(l) => {
                        out.extend(l.tools.iter().cloned());
                        walk(&l.body, out);
                    }
                    _ => {}
                }
            }
        }
        let mut out = BTreeSet::new();
        walk(&self.steps, &mut out);
        out
    }

    /// Templates may only reference inputs and variables bound earlier.
    pub fn check_bindings(&self) -> Result<(), ToolError> {
        let mut bound: BTreeSet<String> = self.spec.parameters.iter().map(|p| p.name.clone()).collect();
        bound.insert("input".into());
        bound.insert("last".into());
        check_steps(&self.steps, &mut bound, "steps")?;
        if let Some(o) = &self.output {
            check_template(o, &bound, "output")?;
        }
        Ok(())
    }

    /// Plan invariants against a registry: referenced tools exist.
    pub fn check_against(&self, registry: &Registry) -> Result<(), ToolError> {
        self.spec.validate()?;
        self.check_bindings()?;
        for tool in self.referenced_tools() {
            if tool == self.spec.name {
                return Err(err_at("steps", format!("composite '{tool}' cannot call itself")));
            }
            if !registry.contains(&tool) {
                return Err(err_at("steps", format!("plan references unknown tool '{tool}'"))
                    .with_detail(json!({ "path": "steps", "tool": tool })));
            }
        }
        Ok(())
    }
}

fn check_steps(steps: &[Step], bound: &mut BTreeSet<String>, path: &str) -> Result<(), ToolError> {
    for (i, s) in steps.iter().enumerate() {
        let sp = format!("{path}[{i}]");
        match &s.kind {
            StepKind::Call(c) => check_template(&c.arguments, bound, &format!("{sp}.arguments"))?,
            StepKind::Parallel { calls, .. } => {
                for (j, c) in calls.iter().enumerate() {
                    check_template(&c.arguments, bound, &format!("{sp}.parallel[{j}].arguments"))?;
                }
            }
            StepKind::LoopUntil(l) => {
                for name in crate::agentic::placeholder_names(&l.prompt) {
                    if !bound.contains(&name) {
                        return Err(unbound(&format!("{sp}.loop.prompt"), &name));
                    }
                }
                let mut inner = bound.clone();
                inner.insert("iteration".into());
                check_steps(&l.body, &mut inner, &format!("{sp}.loop.body"))?;
            }
            StepKind::Bind { path: p, var } => {
                check_reference(p, bound, &format!("{sp}.bind.path"))?;
                bound.insert(var.clone());
            }
            StepKind::Transform { input, options, .. } => {
                check_template(input, bound, &format!("{sp}.input"))?;
                check_template(&Value::Object(options.clone()), bound, &sp)?;
            }
        }
        if let Some(v) = &s.bind_as {
            bound.insert(v.clone());
        }
    }
    Ok(())
}

fn unbound(path: &str, name: &str) -> ToolError {
    err_at(path, format!("template references unbound variable '${name}'"))
        .with_detail(json!({ "path": path, "variable": name }))
}

fn check_reference(expr: &str, bound: &BTreeSet<String>, path: &str) -> Result<(), ToolError> {
    if expr.starts_with('.') || expr.starts_with('[') {
        return Ok(()); // relative to $last
    }
    let r = parse_ref(expr).ok_or_else(|| err_at(path, format!("'{expr}' is not a variable reference")))?;
    if !bound.contains(&r.root) {
        return Err(unbound(path, &r.root));
    }
    Ok(())
}

fn check_template(t: &Value, bound: &BTreeSet<String>, path: &str) -> Result<(), ToolError> {
    match t {
        Value::String(s) => {
            for root in template_roots(s) {
                if !bound.contains(&root) {
                    return Err(unbound(path, &root));
                }
            }
            Ok(())
        }
        Value::Array(items) => {
            for (i, v) in items.iter().enumerate() {
                check_template(v, bound, &format!("{path}[{i}]"))?;
            }
            Ok(())
        }
        Value::Object(m) => {
            for (k, v) in m {
                check_template(v, bound, &format!("{path}.{k}"))?;
            }
            Ok(())
        }
        _ => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Seg {
    Field(String),
    Index(usize),
}

#[derive(Debug, Clone, PartialEq)]
struct Ref {
    root: String,
    path: Vec<Seg>,
}

fn whole_ref_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\$([A-Za-z_][A-Za-z0-9_]*)((?:\.[A-Za-z0-9_\-]+|\[[0-9]+\])*)$").unwrap())
}

fn interp_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\$\$|\$\{([^}]*)\}").unwrap())
}

fn parse_path(text: &str) -> Option<Vec<Seg>> {
    let mut segs = Vec::new();
    let mut rest = text;
    while !rest.is_empty() {
        if let Some(r) = rest.strip_prefix('.') {
            let end = r.find(['.', '[']).unwrap_or(r.len());
            if end == 0 {
                return None;
            }
            segs.push(Seg::Field(r[..end].to_string()));
            rest = &r[end..];
        } else {
            let r = rest.strip_prefix('[')?;
            let end = r.find(']')?;
            segs.push(Seg::Index(r[..end].parse().ok()?));
            rest = &r[end + 1..];
        }
    }
    Some(segs)
}

fn parse_ref(expr: &str) -> Option<Ref> {
    let expr = if expr.starts_with('$') { expr.to_string() } else { format!("${expr}") };
    let caps = whole_ref_regex().captures(&expr)?;
    Some(Ref { root: caps[1].to_string(), path: parse_path(&caps[2])? })
}

fn template_roots(s: &str) -> Vec<String> {
    if s.starts_with("$$") {
        return Vec::new();
    }
    if let Some(r) = parse_ref(s).filter(|_| s.starts_with('$')) {
        return vec![r.root];
    }
    interp_regex()
        .captures_iter(s)
        .filter_map(|c| c.get(1).map(|m| m.as_str().to_string()))
        .filter_map(|inner| parse_ref(&inner).map(|r| r.root))
        .collect()
}

fn follow<'a>(value: &'a Value, path: &[Seg]) -> Option<&'a Value> {
    path.iter().try_fold(value, |v, seg| match seg {
        Seg::Field(f) => v.get(f.as_str()),
        Seg::Index(i) => v.get(*i),
    })
}

fn seg_text(path: &[Seg]) -> String {
    path.iter()
        .map(|s| match s {
            Seg::Field(f) => format!(".{f}"),
            Seg::Index(i) => format!("[{i}]"),
        })
        .collect()
}

/// Variable environment of one plan execution.
pub type Vars = Map<String, Value>;

fn lookup(r: &Ref, vars: &Vars) -> Result<Value, ToolError> {
    let root = vars.get(&r.root).ok_or_else(|| ToolError::execution(format!("variable '${}' is not bound", r.root)))?;
    follow(root, &r.path).cloned().ok_or_else(|| {
        ToolError::execution(format!("path '{}' not found in '${}'", seg_text(&r.path), r.root))
            .with_detail(json!({ "variable": r.root, "path": seg_text(&r.path) }))
    })
}

/// Resolves a bind path: `$var.path` or a path relative to `$last`.
pub fn resolve_path(expr: &str, vars: &Vars) -> Result<Value, ToolError> {
    let r = if expr.starts_with('.') || expr.starts_with('[') {
        Ref {
            root: "last".into(),
            path: parse_path(expr).ok_or_else(|| ToolError::execution(format!("malformed path '{expr}'")))?,
        }
    } else {
        parse_ref(expr).ok_or_else(|| ToolError::execution(format!("malformed reference '{expr}'")))?
    };
    lookup(&r, vars)
}

/// Instantiates a template against the variables.
pub fn render_template(t: &Value, vars: &Vars) -> Result<Value, ToolError> {
    match t {
        Value::String(s) => {
            if let Some(rest) = s.strip_prefix("$$") {
                return Ok(Value::String(format!("${rest}")));
            }
            if s.starts_with('$') {
                if let Some(r) = parse_ref(s) {
                    return lookup(&r, vars);
                }
            }
            let mut failure = None;
            let out = interp_regex().replace_all(s, |c: &regex::Captures<'_>| {
                let Some(inner) = c.get(1) else {
                    return "$".to_string();
                };
                match parse_ref(inner.as_str()).map(|r| lookup(&r, vars)) {
                    Some(Ok(Value::String(v))) => v,
                    Some(Ok(v)) => v.to_string(),
                    Some(Err(e)) => {
                        failure.get_or_insert(e);
                        String::new()
                    }
                    None => c[0].to_string(),
                }
            });
            match failure {
                Some(e) => Err(e),
                None => Ok(Value::String(out.into_owned())),
            }
        }
        Value::Array(items) => {
            items.iter().map(|v| render_template(v, vars)).collect::<Result<_, _>>().map(Value::Array)
        }
        Value::Object(m) => m
            .iter()
            .map(|(k, v)| Ok((k.clone(), render_template(v, vars)?)))
            .collect::<Result<Map<_, _>, ToolError>>()
            .map(Value::Object),
        other => Ok(other.clone()),
    }
}

/// Known transform operations.
pub const TRANSFORMS: &[&str] = &[
    "identity",
    "upper",
    "lower",
    "trim",
    "reverse",
    "length",
    "word_count",
    "concat",
    "join",
    "split",
    "sum",
    "mean",
    "min",
    "max",
    "add",
    "subtract",
    "multiply",
    "divide",
    "round",
    "sort",
    "unique",
    "contains",
];

fn numbers(v: &Value, op: &str) -> Result<Vec<f64>, ToolError> {
    v.as_array()
        .ok_or_else(|| ToolError::execution(format!("{op} needs a list of numbers")))?
        .iter()
        .map(|x| x.as_f64().ok_or_else(|| ToolError::execution(format!("{op} needs a list of numbers"))))
        .collect()
}

fn num(x: f64) -> Value {
    if x.fract() == 0.0 && x.abs() < 9.0e15 {
        json!(x as i64)
    } else {
        json!(x)
    }
}

fn text<'a>(v: &'a Value, op: &str) -> Result<&'a str, ToolError> {
    v.as_str().ok_or_else(|| ToolError::execution(format!("{op} needs a string")))
}

/// Applies a pure transform.
pub fn apply_transform(op: &str, input: &Value, options: &Map<String, Value>) -> Result<Value, ToolError> {
    let pair = || -> Result<(f64, f64), ToolError> {
        let xs = numbers(input, op)?;
        match xs.as_slice() {
            [a, b] => Ok((*a, *b)),
            _ => Err(ToolError::execution(format!("{op} needs exactly two numbers"))),
        }
    };
    Ok(match op {
        "identity" => input.clone(),
        "upper" => json!(text(input, op)?.to_uppercase()),
        "lower" => json!(text(input, op)?.to_lowercase()),
        "trim" => json!(text(input, op)?.trim()),
        "reverse" => match input {
            Value::String(s) => json!(s.chars().rev().collect::<String>()),
            Value::Array(a) => Value::Array(a.iter().rev().cloned().collect()),
            _ => return Err(ToolError::execution("reverse needs a string or list")),
        },
        "length" => match input {
            Value::String(s) => json!(s.chars().count()),
            Value::Array(a) => json!(a.len()),
            Value::Object(m) => json!(m.len()),
            _ => return Err(ToolError::execution("length needs a string, list or object")),
        },
        "word_count" => json!(text(input, op)?.split_whitespace().count()),
        "concat" => {
            let parts = input.as_array().ok_or_else(|| ToolError::execution("concat needs a list"))?;
            json!(parts
                .iter()
                .map(|p| p.as_str().map(str::to_string).unwrap_or_else(|| p.to_string()))
                .collect::<String>())
        }
        "join" => {
            let sep = options.get("sep").and_then(Value::as_str).unwrap_or(", ");
            let parts = input.as_array().ok_or_else(|| ToolError::execution("join needs a list"))?;
            json!(parts
                .iter()
                .map(|p| p.as_str().map(str::to_string).unwrap_or_else(|| p.to_string()))
                .collect::<Vec<_>>()
                .join(sep))
        }
        "split" => {
            let sep = options.get("sep").and_then(Value::as_str).unwrap_or(",");
            json!(text(input, op)?.split(sep).map(str::trim).filter(|s| !s.is_empty()).collect::<Vec<_>>())
        }
        "sum" => num(numbers(input, op)?.iter().sum()),
        "mean" => {
            let xs = numbers(input, op)?;
            if xs.is_empty() {
                return Err(ToolError::execution("mean of an empty list"));
            }
            num(xs.iter().sum::<f64>() / xs.len() as f64)
        }
        "min" | "max" => {
            let xs = numbers(input, op)?;
            let pick = if op == "min" { f64::min } else { f64::max };
            let v =
                xs.into_iter().reduce(pick).ok_or_else(|| ToolError::execution(format!("{op} of an empty list")))?;
            num(v)
        }
        "add" => pair().map(|(a, b)| num(a + b))?,
        "subtract" => pair().map(|(a, b)| num(a - b))?,
        "multiply" => pair().map(|(a, b)| num(a * b))?,
        "divide" => {
            let (a, b) = pair()?;
            if b == 0.0 {
                return Err(ToolError::execution("division by zero"));
            }
            num(a / b)
        }
        "round" => {
            let x = input.as_f64().ok_or_else(|| ToolError::execution("round needs a number"))?;
            let digits = options.get("digits").and_then(Value::as_i64).unwrap_or(0).clamp(0, 12) as i32;
            let f = 10f64.powi(digits);
            num((x * f).round() / f)
        }
        "sort" => {
            let mut items = input.as_array().ok_or_else(|| ToolError::execution("sort needs a list"))?.clone();
            items.sort_by(|a, b| match (a.as_f64(), b.as_f64()) {
                (Some(x), Some(y)) => x.total_cmp(&y),
                _ => a.to_string().cmp(&b.to_string()),
            });
            Value::Array(items)
        }
        "unique" => {
            let items = input.as_array().ok_or_else(|| ToolError::execution("unique needs a list"))?;
            let mut out: Vec<Value> = Vec::new();
            for v in items {
                if !out.contains(v) {
                    out.push(v.clone());
                }
            }
            Value::Array(out)
        }
        "contains" => {
            let needle = options.get("value").cloned().unwrap_or(Value::Null);
            match input {
                Value::String(s) => json!(needle.as_str().is_some_and(|n| s.contains(n))),
                Value::Array(a) => json!(a.contains(&needle)),
                _ => return Err(ToolError::execution("contains needs a string or list")),
            }
        }
        other => return Err(ToolError::execution(format!("unknown transform '{other}'"))),
    })
}

/// One executed call inside a composite.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct TraceRecord {
    pub step: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iteration: Option<usize>,
    pub tool: String,
    pub arguments: Value,
    pub status: crate::protocol::Status,
    pub duration_ms: f64,
}

/// Result of executing a plan: the output value and every call made.
#[derive(Debug, Clone)]
pub struct PlanRun {
    pub payload: Value,
    pub trace: Vec<TraceRecord>,
}

fn record(trace: &mut Vec<TraceRecord>, step: usize, iteration: Option<usize>, call: &ToolCall, r: &ToolResult) {
    trace.push(TraceRecord {
        step,
        iteration,
        tool: call.name.clone(),
        arguments: Value::Object(call.arguments.clone()),
        status: r.status(),
        duration_ms: r.duration_ms,
    });
}

fn build_call(c: &CallStep, vars: &Vars) -> Result<ToolCall, ToolError> {
    let args = render_template(&c.arguments, vars)?;
    Ok(ToolCall::new(c.tool.clone(), args))
}

/// Runs the calls concurrently (at most `width` at a time) and returns
/// their results in declaration order. Failing branches do not cancel the
/// others.
pub async fn execute_parallel(ctx: &CallContext, calls: Vec<ToolCall>, width: usize) -> Vec<ToolResult> {
    stream::iter(calls.into_iter().map(|c| ctx.call(c))).buffered(width.max(1)).collect().await
}

fn parallel_entry(r: &ToolResult) -> Value {
    match &r.outcome {
        Ok(v) => v.clone(),
        Err(e) => json!({ "error": e }),
    }
}

fn loop_prompt(spec: &LoopSpec, vars: &Vars, iteration: usize, trace: &[Value], tools: &[String]) -> String {
    let rendered = crate::agentic::render_placeholders(&spec.prompt, |name| {
        vars.get(name).map(|v| match v {
            Value::String(s) => s.clone(),
            other => other.to_string(),
        })
    });
    format!(
        "ROLE: LoopAgent\n{rendered}\nIteration: {iteration}\nAvailable tools: {}\nTrace: {}\n\
         Reply with one tool call as JSON {{\"name\": ..., \"arguments\": {{...}}}}; \
         call \"{STOP_CALL}\" with the final answer as its arguments to finish.",
        tools.join(", "),
        Value::Array(trace.to_vec())
    )
}

/// Agent-driven loop: each iteration the agent picks the next call from
/// the accumulated trace, until it emits the stop call or the bound is hit.
pub async fn execute_loop(
    ctx: &CallContext,
    spec: &LoopSpec,
    vars: &Vars,
    step_index: usize,
    trace: &mut Vec<TraceRecord>,
) -> Result<Value, ToolError> {
    let backends = ctx.services().backends.clone();
    let tools = if spec.tools.is_empty() {
        ctx.services().registry.list_tools(&Default::default()).into_iter().map(|s| s.name).collect()
    } else {
        spec.tools.clone()
    };
    let settings = GenerationSettings::default();
    let mut history: Vec<Value> = Vec::new();
    let mut last = Value::Null;
    for iteration in 1..=spec.max_iterations {
        let prompt = loop_prompt(spec, vars, iteration, &history, &tools);
        let parse = |text: &str| -> Result<ToolCall, String> {
            let v = extract_json(text).ok_or("output is not JSON")?;
            call_from_value(&v).map_err(|e| e.message)
        };
        let first = backends.generate(&spec.backend, &prompt, &settings).await?;
        let call = match parse(&first) {
            Ok(c) => c,
            Err(e) => {
                let second = backends.generate(&spec.backend, &retry_prompt(&prompt, &e), &settings).await?;
                parse(&second).map_err(|e2| {
                    ToolError::execution(format!("loop agent output is not a tool call (after one retry): {e2}"))
                        .with_detail(json!({ "iteration": iteration, "first_error": e, "second_error": e2 }))
                })?
            }
        };
        if call.name == STOP_CALL {
            return Ok(json!({
                "stopped": true,
                "iterations": iteration,
                "result": Value::Object(call.arguments),
                "trace": history,
            }));
        }
        let result = if tools.contains(&call.name) {
            ctx.call(call.clone()).await
        } else {
            ToolResult::err(
                ToolError::not_found(format!("loop agent chose '{}', which is not an available tool", call.name)),
                0.0,
            )
        };
        record(trace, step_index, Some(iteration), &call, &result);
        let mut entry = json!({ "iteration": iteration, "call": call, "status": result.status() });
        match &result.outcome {
            Ok(v) => {
                entry["payload"] = v.clone();
                last = v.clone();
                if !spec.body.is_empty() {
                    let mut inner = vars.clone();
                    inner.insert("last".into(), v.clone());
                    inner.insert("iteration".into(), json!(iteration));
                    last = Box::pin(run_steps(ctx, &spec.body, &mut inner, trace)).await?;
                    entry["body"] = last.clone();
                }
            }
            Err(e) => entry["error"] = json!(e),
        }
        history.push(entry);
    }
    Ok(json!({
        "stopped": false,
        "iterations": spec.max_iterations,
        "result": Value::Null,
        "last": last,
        "trace": history,
    }))
}

async fn run_steps(
    ctx: &CallContext,
    steps: &[Step],
    vars: &mut Vars,
    trace: &mut Vec<TraceRecord>,
) -> Result<Value, ToolError> {
    for (i, step) in steps.iter().enumerate() {
        let value = match &step.kind {
            StepKind::Call(c) => {
                let call = build_call(c, vars)?;
                let r = ctx.call(call.clone()).await;
                record(trace, i, None, &call, &r);
                r.outcome?
            }
            StepKind::Parallel { calls, width } => {
                let built = calls.iter().map(|c| build_call(c, vars)).collect::<Result<Vec<_>, _>>()?;
                let results = execute_parallel(ctx, built.clone(), *width).await;
                for (c, r) in built.iter().zip(&results) {
                    record(trace, i, None, c, r);
                }
                Value::Array(results.iter().map(parallel_entry).collect())
            }
            StepKind::LoopUntil(l) => execute_loop(ctx, l, vars, i, trace).await?,
            StepKind::Bind { path, var } => {
                let v = resolve_path(path, vars)?;
                vars.insert(var.clone(), v);
                continue;
            }
            StepKind::Transform { op, input, options } => {
                let input = render_template(input, vars)?;
                let options = match render_template(&Value::Object(options.clone()), vars)? {
                    Value::Object(m) => m,
                    _ => Map::new(),
                };
                apply_transform(op, &input, &options)?
            }
        };
        if let Some(name) = &step.bind_as {
            vars.insert(name.clone(), value.clone());
        }
        vars.insert("last".into(), value);
    }
    Ok(vars.get("last").cloned().unwrap_or(Value::Null))
}

/// Executes a plan body against validated arguments.
pub async fn execute_plan(plan: &CompositePlan, args: Arguments, ctx: &CallContext) -> Result<PlanRun, ToolError> {
    let mut vars = Vars::new();
    for (k, v) in &args {
        vars.insert(k.clone(), v.clone());
    }
    for p in &plan.spec.parameters {
        vars.entry(p.name.clone()).or_insert(Value::Null);
    }
    vars.insert("input".into(), Value::Object(args));
    vars.insert("last".into(), Value::Null);
    let mut trace = Vec::new();
    let last = run_steps(ctx, &plan.steps, &mut vars, &mut trace).await?;
    let payload = match &plan.output {
        Some(t) => render_template(t, &vars)?,
        None => last,
    };
    Ok(PlanRun { payload, trace })
}

/// Handler executing a plan.
pub struct PlanHandler {
    plan: Arc<CompositePlan>,
}

impl PlanHandler {
    pub fn new(plan: CompositePlan) -> Self {
        Self { plan: Arc::new(plan) }
    }
}

#[async_trait]
impl ToolHandler for PlanHandler {
    async fn run(&self, args: Arguments, ctx: &CallContext) -> Result<Value, ToolError> {
        Ok(execute_plan(&self.plan, args, ctx).await?.payload)
    }
}

/// Registers a composite after checking it against the registry.
pub fn compose(registry: &Registry, plan: CompositePlan) -> Result<String, ToolError> {
    plan.check_against(registry)?;
    registry.register(plan.spec.clone(), Origin::Composed, HandlerRef::Plan(plan))
}
