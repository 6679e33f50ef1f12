//! Agent backends and prompt-driven tools.

use std::collections::{BTreeMap, HashSet};
use std::sync::{Arc, OnceLock};

use async_trait::async_trait;
use parking_lot::{Mutex, RwLock};
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::Semaphore;

use crate::caller::CallContext;
use crate::error::ToolError;
use crate::finder::{Strategy, ToolMatch};
use crate::handler::ToolHandler;
use crate::protocol::{call_from_value, Arguments, ParameterSpec, ToolSpec};

/// Candidate budget for one in-context search prompt.
pub const AGENTIC_FIND_LIMIT: usize = 20;
/// Backend id that resolves to the registry's default backend.
pub const DEFAULT_BACKEND: &str = "default";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerationSettings {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
}

/// Text generation behind a stable contract; implementations are
/// interchangeable.
#[async_trait]
pub trait AgentBackend: Send + Sync {
    fn id(&self) -> &str;

    /// Concurrent `generate` calls admitted by the runtime.
    fn max_concurrency(&self) -> usize {
        4
    }

    async fn generate(&self, prompt: &str, settings: &GenerationSettings) -> Result<String, ToolError>;
}

struct Slot {
    backend: Arc<dyn AgentBackend>,
    gate: Arc<Semaphore>,
}

/// Registered backends with a per-backend admission gate.
#[derive(Default)]
pub struct Backends {
    slots: RwLock<BTreeMap<String, Arc<Slot>>>,
    default: RwLock<Option<String>>,
}

impl Backends {
    pub fn new() -> Self {
        Self::default()
    }

    /// The first registered backend becomes the default.
    pub fn register(&self, backend: Arc<dyn AgentBackend>) {
        let id = backend.id().to_string();
        let permits = backend.max_concurrency().max(1);
        self.slots.write().insert(id.clone(), Arc::new(Slot { backend, gate: Arc::new(Semaphore::new(permits)) }));
        let mut default = self.default.write();
        if default.is_none() {
            *default = Some(id);
        }
    }

    pub fn set_default(&self, id: &str) -> Result<(), ToolError> {
        if !self.slots.read().contains_key(id) {
            return Err(ToolError::execution(format!("no agent backend '{id}' is registered")));
        }
        *self.default.write() = Some(id.to_string());
        Ok(())
    }

    pub fn default_id(&self) -> Option<String> {
        self.default.read().clone()
    }

    pub fn ids(&self) -> Vec<String> {
        self.slots.read().keys().cloned().collect()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.read().is_empty()
    }

    /// Maps `default` and the empty id to the default backend.
    pub fn resolve(&self, id: &str) -> Result<String, ToolError> {
        if id.is_empty() || id == DEFAULT_BACKEND {
            return self.default_id().ok_or_else(|| {
                ToolError::execution("no agent backend is configured")
                    .with_detail(json!({ "missing": "agent backend" }))
            });
        }
        if self.slots.read().contains_key(id) {
            Ok(id.to_string())
        } else {
            Err(ToolError::execution(format!("no agent backend '{id}' is registered"))
                .with_detail(json!({ "missing": id })))
        }
    }

    pub async fn generate(&self, id: &str, prompt: &str, settings: &GenerationSettings) -> Result<String, ToolError> {
        let id = self.resolve(id)?;
        let slot = self.slots.read().get(&id).cloned().expect("resolved backend exists");
        let _permit = slot
            .gate
            .clone()
            .acquire_owned()
            .await
            .map_err(|_| ToolError::execution(format!("agent backend '{id}' is shut down")))?;
        slot.backend.generate(prompt, settings).await
    }
}

type RuleFn = Box<dyn Fn(&str) -> Option<String> + Send + Sync>;

enum MockRule {
    Contains(String, String),
    Func(RuleFn),
}

/// Script-table backend: ordered rules map prompt substrings (or
/// predicates) to canned responses, then an optional fallback. The same
/// prompt always yields the same text.
pub struct MockBackend {
    id: String,
    rules: Vec<MockRule>,
    fallback: Option<String>,
    max_concurrency: usize,
    prompts: Mutex<Vec<String>>,
}

impl MockBackend {
    pub fn new(id: impl Into<String>) -> Self {
        Self { id: id.into(), rules: Vec::new(), fallback: None, max_concurrency: 4, prompts: Mutex::new(Vec::new()) }
    }

    /// Responds with `response` when the prompt contains `pattern`.
    pub fn when(mut self, pattern: impl Into<String>, response: impl Into<String>) -> Self {
        self.rules.push(MockRule::Contains(pattern.into(), response.into()));
        self
    }

    pub fn when_fn(mut self, f: impl Fn(&str) -> Option<String> + Send + Sync + 'static) -> Self {
        self.rules.push(MockRule::Func(Box::new(f)));
        self
    }

    pub fn otherwise(mut self, response: impl Into<String>) -> Self {
        self.fallback = Some(response.into());
        self
    }

    pub fn with_max_concurrency(mut self, n: usize) -> Self {
        self.max_concurrency = n;
        self
    }

    /// Every prompt seen so far, in arrival order.
    pub fn prompts(&self) -> Vec<String> {
        self.prompts.lock().clone()
    }

    pub fn respond(&self, prompt: &str) -> Option<String> {
        self.rules
            .iter()
            .find_map(|rule| match rule {
                MockRule::Contains(p, r) => prompt.contains(p.as_str()).then(|| r.clone()),
                MockRule::Func(f) => f(prompt),
            })
            .or_else(|| self.fallback.clone())
    }
}

#[async_trait]
impl AgentBackend for MockBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn max_concurrency(&self) -> usize {
        self.max_concurrency
    }

    async fn generate(&self, prompt: &str, _settings: &GenerationSettings) -> Result<String, ToolError> {
        self.prompts.lock().push(prompt.to_string());
        self.respond(prompt).ok_or_else(|| {
            ToolError::execution(format!("mock backend '{}' has no scripted response for this prompt", self.id))
        })
    }
}

/// Adapter for a hosted generation endpoint: POSTs
/// `{"prompt", "temperature"}` and reads `text` from the JSON reply.
pub struct HttpBackend {
    id: String,
    url: String,
    client: reqwest::Client,
}

impl HttpBackend {
    pub fn new(id: impl Into<String>, url: impl Into<String>) -> Self {
        Self { id: id.into(), url: url.into(), client: reqwest::Client::new() }
    }
}

#[async_trait]
impl AgentBackend for HttpBackend {
    fn id(&self) -> &str {
        &self.id
    }

    async fn generate(&self, prompt: &str, settings: &GenerationSettings) -> Result<String, ToolError> {
        let fail = |e: String| ToolError::execution(format!("agent backend '{}' failed: {e}", self.id));
        let resp = self
            .client
            .post(&self.url)
            .json(&json!({ "prompt": prompt, "temperature": settings.temperature }))
            .send()
            .await
            .map_err(|e| fail(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(fail(format!("HTTP {}", resp.status())));
        }
        let body: Value = resp.json().await.map_err(|e| fail(e.to_string()))?;
        body.get("text")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| fail("reply has no 'text' field".into()))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputContract {
    #[default]
    FreeText,
    ToolCall,
    ScoredReport,
}

/// Declarative agentic tool: a prompt template rendered from the call's
/// arguments and sent to a backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub prompt_template: String,
    #[serde(default)]
    pub input_parameters: Vec<ParameterSpec>,
    #[serde(default)]
    pub output_contract: OutputContract,
    #[serde(default = "default_backend")]
    pub backend: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
}

fn default_backend() -> String {
    DEFAULT_BACKEND.to_string()
}

fn placeholder_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{([A-Za-z_][A-Za-z0-9_]*)\}").unwrap())
}

/// `{name}` placeholders in order of appearance.
pub fn placeholder_names(template: &str) -> Vec<String> {
    placeholder_regex().captures_iter(template).map(|c| c[1].to_string()).collect()
}

/// Replaces each `{name}` with `lookup(name)`, or with nothing when unbound.
pub fn render_placeholders(template: &str, lookup: impl Fn(&str) -> Option<String>) -> String {
    placeholder_regex().replace_all(template, |c: &regex::Captures<'_>| lookup(&c[1]).unwrap_or_default()).into_owned()
}

impl AgentConfig {
    pub fn new(prompt_template: impl Into<String>, input_parameters: Vec<ParameterSpec>) -> Self {
        Self {
            prompt_template: prompt_template.into(),
            input_parameters,
            output_contract: OutputContract::FreeText,
            backend: default_backend(),
            temperature: None,
        }
    }

    pub fn contract(mut self, contract: OutputContract) -> Self {
        self.output_contract = contract;
        self
    }

    pub fn backend(mut self, id: impl Into<String>) -> Self {
        self.backend = id.into();
        self
    }

    pub fn placeholders(&self) -> Vec<String> {
        placeholder_names(&self.prompt_template)
    }

    /// Every placeholder must name an input parameter or `{context}`.
    pub fn check_placeholders(&self) -> Result<(), ToolError> {
        for name in self.placeholders() {
            if name != "context" && !self.input_parameters.iter().any(|p| p.name == name) {
                return Err(ToolError::spec_at(
                    "prompt_template",
                    format!("placeholder '{{{name}}}' does not name an input parameter"),
                )
                .with_detail(json!({ "path": "prompt_template", "placeholder": name })));
            }
        }
        Ok(())
    }

    /// Substitutes arguments (strings verbatim, other values as JSON;
    /// absent optional values as empty text).
    pub fn render(&self, args: &Arguments, context: Option<&str>) -> String {
        render_placeholders(&self.prompt_template, |name| {
            if name == "context" && !args.contains_key("context") {
                return context.map(str::to_string);
            }
            args.get(name).map(|v| match v {
                Value::String(s) => s.clone(),
                other => other.to_string(),
            })
        })
    }

    /// The tool spec an agentic tool exposes, using the configured inputs.
    pub fn apply_to(&self, mut spec: ToolSpec) -> ToolSpec {
        if spec.parameters.is_empty() {
            spec.parameters = self.input_parameters.clone();
        }
        spec
    }
}

/// First JSON value embedded in model output, tolerating code fences and
/// surrounding prose.
pub fn extract_json(text: &str) -> Option<Value> {
    let trimmed = text.trim();
    if let Ok(v) = serde_json::from_str(trimmed) {
        return Some(v);
    }
    for (open, close) in [('{', '}'), ('[', ']')] {
        if let (Some(start), Some(end)) = (trimmed.find(open), trimmed.rfind(close)) {
            if start < end {
                if let Ok(v) = serde_json::from_str(&trimmed[start..=end]) {
                    return Some(v);
                }
            }
        }
    }
    None
}

fn parse_contract(contract: OutputContract, text: &str) -> Result<Value, String> {
    match contract {
        OutputContract::FreeText => Ok(json!({ "text": text.trim() })),
        OutputContract::ToolCall => {
            let value = extract_json(text).ok_or("output is not JSON")?;
            let call = call_from_value(&value).map_err(|e| e.message)?;
            Ok(json!({ "name": call.name, "arguments": call.arguments }))
        }
        OutputContract::ScoredReport => {
            let value = extract_json(text).ok_or("output is not JSON")?;
            let scores = value.get("scores").and_then(Value::as_object).ok_or("report has no 'scores' object")?;
            for (dim, s) in scores {
                let x = s.as_f64().ok_or(format!("score '{dim}' is not a number"))?;
                if !(0.0..=10.0).contains(&x) {
                    return Err(format!("score '{dim}' = {x} is outside [0, 10]"));
                }
            }
            Ok(value)
        }
    }
}

/// Appended to the prompt when the previous output did not parse.
pub fn retry_prompt(prompt: &str, error: &str) -> String {
    format!(
        "{prompt}\n\nYour previous output could not be parsed: {error}\nRespond again following the required format."
    )
}

/// Renders, generates and parses per the output contract; a parse failure
/// is retried once with the error appended.
pub async fn run_agentic_tool(
    backends: &Backends,
    config: &AgentConfig,
    args: &Arguments,
    context: Option<&str>,
) -> Result<Value, ToolError> {
    config.check_placeholders()?;
    let settings = GenerationSettings { temperature: config.temperature };
    let prompt = config.render(args, context);
    let first = backends.generate(&config.backend, &prompt, &settings).await?;
    let err = match parse_contract(config.output_contract, &first) {
        Ok(v) => return Ok(v),
        Err(e) => e,
    };
    let second = backends.generate(&config.backend, &retry_prompt(&prompt, &err), &settings).await?;
    parse_contract(config.output_contract, &second).map_err(|e2| {
        ToolError::execution(format!("agent output failed to parse twice: {e2}"))
            .with_detail(json!({ "first_error": err, "second_error": e2 }))
    })
}

/// Handler wrapping an [`AgentConfig`].
pub struct AgentHandler {
    config: AgentConfig,
}

impl AgentHandler {
    pub fn new(config: AgentConfig) -> Self {
        Self { config }
    }
}

#[async_trait]
impl ToolHandler for AgentHandler {
    async fn run(&self, args: Arguments, ctx: &CallContext) -> Result<Value, ToolError> {
        run_agentic_tool(&ctx.services().backends, &self.config, &args, None).await
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgenticFindOutcome {
    pub matches: Vec<ToolMatch>,
    /// Names the backend returned that were not candidates.
    pub dropped: Vec<String>,
}

pub fn agentic_find_prompt(query: &str, candidates: &[ToolSpec]) -> String {
    let mut prompt = format!("ROLE: ToolFinder\nQuery: {query}\nCandidates:\n");
    for spec in candidates {
        prompt.push_str(&format!("- {}: {}\n", spec.name, spec.description));
    }
    prompt.push_str("Reply with a JSON array of the relevant candidate names, most relevant first.");
    prompt
}

fn parse_names(text: &str) -> Vec<String> {
    if let Some(Value::Array(items)) = extract_json(text) {
        return items.iter().filter_map(|v| v.as_str().map(str::to_string)).collect();
    }
    text.split(['\n', ','])
        .map(|s| s.trim().trim_start_matches(['-', '*']).trim().trim_matches(['"', '\'', '`']).to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

/// In-context selection over a bounded candidate set. Names outside the
/// candidate set are dropped and reported. Scores are `1 / rank`.
pub async fn agentic_find(
    backends: &Backends,
    backend: &str,
    query: &str,
    candidates: &[ToolSpec],
) -> Result<AgenticFindOutcome, ToolError> {
    if candidates.is_empty() {
        return Err(ToolError::spec_at("candidates", "agentic search needs at least one candidate tool"));
    }
    let candidates = &candidates[..candidates.len().min(AGENTIC_FIND_LIMIT)];
    let text =
        backends.generate(backend, &agentic_find_prompt(query, candidates), &GenerationSettings::default()).await?;
    let allowed: HashSet<&str> = candidates.iter().map(|s| s.name.as_str()).collect();
    let mut seen = HashSet::new();
    let mut matches = Vec::new();
    let mut dropped = Vec::new();
    for name in parse_names(&text) {
        if !allowed.contains(name.as_str()) {
            dropped.push(name);
            continue;
        }
        if seen.insert(name.clone()) {
            matches.push(ToolMatch {
                score: 1.0 / (matches.len() + 1) as f64,
                tool_name: name,
                strategy: Strategy::Agentic,
                breakdown: None,
            });
        }
    }
    if !dropped.is_empty() {
        tracing::warn!(?dropped, "agentic search dropped names outside the candidate set");
    }
    Ok(AgenticFindOutcome { matches, dropped })
}
