//! Shared test support: an independent brute-force keyword scorer and
//! seeded instance generators.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use rand::rngs::StdRng;
use rand::seq::IndexedRandom;
use rand::Rng;
use toolhub::{ParamType, ParameterSpec, ToolSpec};

pub const NAME_BONUS: f64 = 2.0;
pub const PHRASE_BONUS: f64 = 1.5;

pub fn fixture(rel: &str) -> String {
    let path = format!("{}/fixtures/{rel}", env!("CARGO_MANIFEST_DIR"));
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{path}: {e}"))
}

/// Straight-line reimplementation of the normalization pipeline, read from
/// the fixture files rather than through the library.
pub struct OracleText {
    pub stop: BTreeSet<String>,
    /// (suffix, replacement, min stem length)
    pub rules: Vec<(String, String, usize)>,
}

impl OracleText {
    pub fn load() -> Self {
        let stop = fixture("text/stopwords.txt")
            .lines()
            .map(|l| l.trim().to_string())
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .collect();
        let rules = fixture("text/stem_rules.tsv")
            .lines()
            .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
            .map(|l| {
                let c: Vec<&str> = l.split('\t').collect();
                (c[0].to_string(), c[1].to_string(), c[2].parse().unwrap())
            })
            .collect();
        Self { stop, rules }
    }

    pub fn tokens(text: &str) -> Vec<String> {
        let mut out = Vec::new();
        let mut cur = String::new();
        for ch in text.to_lowercase().chars() {
            if ch.is_ascii_lowercase() || ch.is_ascii_digit() {
                cur.push(ch);
            } else if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
        out
    }

    /// Longest eligible suffix wins; an identity winner stops stemming.
    pub fn stem(&self, word: &str) -> String {
        let mut w = word.to_string();
        loop {
            let best = self
                .rules
                .iter()
                .filter(|(s, _, min)| w.ends_with(s.as_str()) && w.len() - s.len() >= *min)
                .max_by_key(|(s, _, _)| s.len());
            match best {
                Some((s, r, _)) if s != r => w = format!("{}{}", &w[..w.len() - s.len()], r),
                _ => return w,
            }
        }
    }

    pub fn terms(&self, text: &str) -> Vec<String> {
        Self::tokens(text)
            .into_iter()
            .filter(|t| !self.stop.contains(t))
            .map(|t| self.stem(&t))
            .filter(|t| !t.is_empty() && !self.stop.contains(t))
            .collect()
    }

    fn phrases(terms: &[String]) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        for n in [2, 3] {
            for w in terms.windows(n) {
                out.insert(w.join(" "));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleHit {
    pub name: String,
    pub score: f64,
}

/// Relevance = Σ tf · idf · ln(1 + qf), idf = max(0, ln(N / (1 + df)) + 1),
/// then the name and phrase multipliers. Hits are score-descending, ties by
/// name.
pub fn oracle_search(
    text: &OracleText,
    specs: &[ToolSpec],
    query: &str,
    name_bonus: f64,
    phrase_bonus: f64,
) -> Vec<OracleHit> {
    struct Doc {
        name: String,
        tf: BTreeMap<String, usize>,
        name_terms: BTreeSet<String>,
        phrases: BTreeSet<String>,
    }
    let docs: Vec<Doc> = specs
        .iter()
        .map(|s| {
            let name_terms = text.terms(&s.name);
            let mut all = name_terms.clone();
            let mut phrases = BTreeSet::new();
            let segments = std::iter::once(&s.description).chain(s.parameters.iter().map(|p| &p.description));
            for seg in segments {
                let t = text.terms(seg);
                phrases.extend(OracleText::phrases(&t));
                all.extend(t);
            }
            let mut tf = BTreeMap::new();
            for t in all {
                *tf.entry(t).or_insert(0) += 1;
            }
            Doc { name: s.name.clone(), tf, name_terms: name_terms.into_iter().collect(), phrases }
        })
        .collect();
    let n = docs.len() as f64;
    let q = text.terms(query);
    let q_phrases = OracleText::phrases(&q);
    let mut qf: BTreeMap<&str, usize> = BTreeMap::new();
    for t in &q {
        *qf.entry(t.as_str()).or_insert(0) += 1;
    }
    let mut hits = Vec::new();
    for d in &docs {
        let mut score = 0.0;
        let mut any = false;
        for (t, &f) in &qf {
            let Some(&tf) = d.tf.get(*t) else { continue };
            any = true;
            let df = docs.iter().filter(|o| o.tf.contains_key(*t)).count() as f64;
            let idf = ((n / (1.0 + df)).ln() + 1.0).max(0.0);
            score += tf as f64 * idf * (1.0 + f as f64).ln();
        }
        if !any {
            continue;
        }
        if qf.keys().any(|t| d.name_terms.contains(*t)) {
            score *= name_bonus;
        }
        if q_phrases.iter().any(|p| d.phrases.contains(p)) {
            score *= phrase_bonus;
        }
        hits.push(OracleHit { name: d.name.clone(), score });
    }
    hits.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap().then_with(|| a.name.cmp(&b.name)));
    hits
}

/// Words chosen to hit stop words, every stemming rule and shared stems.
pub const VOCAB: &[&str] = &[
    "protein",
    "proteins",
    "gene",
    "genes",
    "expression",
    "expressed",
    "search",
    "searching",
    "searches",
    "database",
    "databases",
    "lookup",
    "compound",
    "compounds",
    "binding",
    "binds",
    "predictor",
    "predicts",
    "toxicity",
    "studies",
    "study",
    "organization",
    "relational",
    "conditional",
    "management",
    "darkness",
    "readable",
    "classes",
    "class",
    "helpful",
    "indexed",
    "parser",
    "matches",
    "compute",
    "tools",
    "process",
    "status",
    "analysis",
    "canvas",
    "carefulness",
    "the",
    "of",
    "and",
    "for",
    "with",
    "by",
    "data",
    "score",
    "scores",
    "molecule",
    "molecular",
    "weight",
];

const NAME_WORDS: &[&str] =
    &["protein", "gene", "search", "lookup", "compound", "score", "data", "tool", "class", "parser"];

fn words(rng: &mut StdRng, lo: usize, hi: usize) -> Vec<&'static str> {
    let n = rng.random_range(lo..=hi);
    (0..n).map(|_| *VOCAB.choose(rng).unwrap()).collect()
}

/// A corpus of 1..=10 tools (unique names, optional described parameter)
/// and a query of 1..=6 words.
pub fn keyword_instance(rng: &mut StdRng) -> (Vec<ToolSpec>, String) {
    let count = rng.random_range(1..=10);
    let specs = (0..count)
        .map(|i| {
            let a = NAME_WORDS.choose(rng).unwrap();
            let b = NAME_WORDS.choose(rng).unwrap();
            let mut spec = ToolSpec::new(format!("{a}_{b}_{i}"), words(rng, 2, 12).join(" "));
            if rng.random_bool(0.4) {
                spec = spec.param(ParameterSpec::new("input", ParamType::String, words(rng, 1, 6).join(" ")));
            }
            spec
        })
        .collect();
    (specs, words(rng, 1, 6).join(" "))
}

/// Checks `actual` (name, score) pairs against the oracle: same hits, scores
/// within `tol`, same order except inside groups whose scores tie within
/// `tol`.
pub fn agrees(actual: &[(String, f64)], expected: &[OracleHit], tol: f64) -> Result<(), String> {
    if actual.len() != expected.len() {
        return Err(format!("{} hits, oracle has {}", actual.len(), expected.len()));
    }
    let by_name: BTreeMap<&str, f64> = expected.iter().map(|h| (h.name.as_str(), h.score)).collect();
    for (i, (name, score)) in actual.iter().enumerate() {
        let Some(&want) = by_name.get(name.as_str()) else {
            return Err(format!("unexpected hit {name}"));
        };
        if (score - want).abs() > tol {
            return Err(format!("{name}: score {score} vs oracle {want}"));
        }
        if *name != expected[i].name && (want - expected[i].score).abs() > tol {
            return Err(format!("rank {i}: {name} vs oracle {}", expected[i].name));
        }
    }
    Ok(())
}

pub mod calls {
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;
    use std::time::Duration;

    use async_trait::async_trait;
    use rand::rngs::StdRng;
    use rand::seq::IndexedRandom;
    use rand::Rng;
    use serde_json::{json, Map, Value};
    use toolhub::caller::CallContext;
    use toolhub::protocol::Arguments;
    use toolhub::{HandlerFactory, ParamType, ParameterSpec, ToolError, ToolHandler, ToolSpec, TypeDescriptor};

    /// Every parameter type, two of them required.
    pub fn guarded_spec() -> ToolSpec {
        ToolSpec::new("guarded", "Echoes its text argument repeated count times.")
            .param(ParameterSpec::new("text", ParamType::String, "Text to repeat.").required())
            .param(ParameterSpec::new("count", ParamType::Integer, "Number of repetitions.").required())
            .param(ParameterSpec::new("ratio", ParamType::Number, "Unused ratio."))
            .param(ParameterSpec::new("flags", ParamType::Array(Box::new(ParamType::Boolean)), "Unused flags."))
            .param(ParameterSpec::new("options", ParamType::Object, "Unused options."))
            .returns(TypeDescriptor::object([("text", TypeDescriptor::String)]))
    }

    /// Counts loads and runs; loading takes `load_delay`.
    #[derive(Clone, Default)]
    pub struct Counting {
        pub loads: Arc<AtomicUsize>,
        pub runs: Arc<AtomicUsize>,
        pub load_delay: Duration,
    }

    impl Counting {
        pub fn loads(&self) -> usize {
            self.loads.load(Ordering::SeqCst)
        }

        pub fn runs(&self) -> usize {
            self.runs.load(Ordering::SeqCst)
        }
    }

    struct Repeat(Arc<AtomicUsize>);

    #[async_trait]
    impl ToolHandler for Repeat {
        async fn run(&self, args: Arguments, _ctx: &CallContext) -> Result<Value, ToolError> {
            self.0.fetch_add(1, Ordering::SeqCst);
            let n = args.get("count").and_then(Value::as_u64).unwrap_or(1).min(16) as usize;
            Ok(json!({ "text": args["text"].as_str().unwrap_or_default().repeat(n) }))
        }
    }

    #[async_trait]
    impl HandlerFactory for Counting {
        async fn load(&self, _spec: &ToolSpec, _ctx: &CallContext) -> Result<Arc<dyn ToolHandler>, ToolError> {
            if !self.load_delay.is_zero() {
                tokio::time::sleep(self.load_delay).await;
            }
            self.loads.fetch_add(1, Ordering::SeqCst);
            Ok(Arc::new(Repeat(self.runs.clone())))
        }
    }

    /// `(serialized call, expected error code)` rows from the fixture.
    pub fn invalid_corpus() -> Vec<(String, String)> {
        let text = super::fixture("caller/invalid_calls.json");
        let v: Value = serde_json::from_str(&text).unwrap();
        v["calls"]
            .as_array()
            .unwrap()
            .iter()
            .map(|r| (r["call"].as_str().unwrap().to_string(), r["code"].as_str().unwrap().to_string()))
            .collect()
    }

    fn random_value(rng: &mut StdRng, depth: u32) -> Value {
        match rng.random_range(0..if depth == 0 { 6 } else { 8 }) {
            0 => Value::Null,
            1 => json!(rng.random_bool(0.5)),
            2 => json!(rng.random_range(-1000i64..1000)),
            3 => json!(rng.random_range(-1e6..1e6)),
            4 => json!(random_text(rng, 12)),
            5 => json!(["g", "mg", "HMGCR", "CPD-001", "C9H8O4", "2*(3+4)", "ATGC", "numpy"].choose(rng).unwrap()),
            6 => Value::Array((0..rng.random_range(0..4)).map(|_| random_value(rng, depth - 1)).collect()),
            _ => Value::Object(
                (0..rng.random_range(0..4)).map(|_| (random_text(rng, 6), random_value(rng, depth - 1))).collect(),
            ),
        }
    }

    fn random_text(rng: &mut StdRng, max: usize) -> String {
        const POOL: &[char] =
            &['a', 'b', 'z', '0', '9', ' ', '"', '\\', '{', '}', '[', ']', ':', ',', '\n', '\u{0}', 'é', '字', '🙂'];
        (0..rng.random_range(0..=max)).map(|_| *POOL.choose(rng).unwrap()).collect()
    }

    /// A serialized call for `run()`: garbage text, arbitrary JSON, calls
    /// with random arguments, or damaged valid calls.
    pub fn fuzz_input(rng: &mut StdRng, names: &[String]) -> String {
        let pick_name = |rng: &mut StdRng| -> String {
            if rng.random_bool(0.8) {
                names.choose(rng).unwrap().clone()
            } else {
                random_text(rng, 8)
            }
        };
        match rng.random_range(0..4) {
            0 => random_text(rng, 40),
            1 => random_value(rng, 3).to_string(),
            2 => {
                let keys = [
                    "text",
                    "count",
                    "value",
                    "from_unit",
                    "to_unit",
                    "formula",
                    "query",
                    "top_k",
                    "gene_symbol",
                    "compound_id",
                    "expression",
                    "sequence",
                    "extra",
                ];
                let args: Map<String, Value> = (0..rng.random_range(0..5))
                    .map(|_| (keys.choose(rng).unwrap().to_string(), random_value(rng, 1)))
                    .collect();
                json!({ "name": pick_name(rng), "arguments": args }).to_string()
            }
            _ => {
                let mut s: Vec<char> = json!({ "name": pick_name(rng), "arguments": {"text": "abc", "count": 2} })
                    .to_string()
                    .chars()
                    .collect();
                for _ in 0..rng.random_range(1..4) {
                    let i = rng.random_range(0..s.len());
                    if rng.random_bool(0.5) {
                        s.remove(i);
                    } else {
                        s.insert(i, *['"', '{', '}', ',', 'x', ':'].choose(rng).unwrap());
                    }
                    if s.is_empty() {
                        break;
                    }
                }
                s.into_iter().collect()
            }
        }
    }
}

pub mod demo {
    use std::sync::Arc;

    use rand::rngs::StdRng;
    use rand::seq::IndexedRandom;
    use rand::Rng;
    use serde_json::{json, Map, Value};
    use toolhub::{Hub, MockBackend, ParamType, ToolCall, ToolSpec};

    /// Demo tools that block on a human answer; left out of bulk runs.
    pub const BLOCKING: &[&str] = &["consult_human_expert"];

    /// Canned answers for the demo's agent-backed tools.
    pub fn demo_backend() -> MockBackend {
        MockBackend::new("mock")
            .when(
                "ROLE: ExperimentalDesignScorer",
                r#"{"scores": {"rigor": 7, "feasibility": 8, "novelty": 6}, "overall": 7, "rationale": "Adequate controls."}"#,
            )
            .when("ROLE: HypothesisGenerator", "Inhibiting PCSK9 lowers circulating LDL cholesterol.")
            .otherwise("Statins lower LDL cholesterol.")
    }

    /// A hub with the demo pack and the canned backend.
    pub fn demo_hub() -> Hub {
        let hub = Hub::builder().backend(Arc::new(demo_backend())).build();
        toolhub::demo::install_demo_pack(&hub).unwrap();
        hub
    }

    fn pool(name: &str) -> &'static [&'static str] {
        match name {
            "text" | "text_a" | "text_b" | "query" | "design" | "topic" | "background" => &[
                "hello world",
                "a b\nB c",
                "Statins lower LDL cholesterol.",
                "PCSK9 antibodies and LDL receptor recycling",
                "",
            ],
            "expression" => &["1+2*3", "(2+3)/4", "2^10", "-(4-9)*2.5", "1/0", "2**"],
            "formula" => &["C9H8O4", "H2O", "Ca(OH)2", "NaCl", "Xy2"],
            "from_unit" | "to_unit" => &["mg", "g", "kg", "mL", "L", "nM", "uM", "h", "min", "parsec"],
            "gene_symbol" => &["HMGCR", "pcsk9", "LDLR", "EGFR", "NOPE1"],
            "compound_id" => &["CPD-001", "CPD-003", "CPD-006", "CPD-012", "CPD-999"],
            "disease" => &["hypercholesterolemia", "Melanoma", "scurvy"],
            "drug_name" => &["atorvastatin", "aspirin", "bempedoic acid", "placebo"],
            "package" => &["numpy", "rdkit", "left-pad"],
            "sequence" => &["ATGCGC", "aattgg", "NNNN", "ATGXC"],
            "smiles" => &["CC(=O)OC1=CC=CC=C1C(=O)O", "ClC(Cl)Cl", "O=[N+]([O-])c1ccccc1", "C"],
            _ => &["sample"],
        }
    }

    fn value_for(rng: &mut StdRng, name: &str, ty: &ParamType) -> Value {
        match ty {
            ParamType::String => json!(pool(name).choose(rng).unwrap()),
            ParamType::Integer => match name {
                "top_k" | "limit" | "max_sentences" => json!(rng.random_range(1..=5)),
                _ => json!(rng.random_range(1..=3)),
            },
            ParamType::Number => json!([0.0, 1.0, 2.5, -3.0, 12.0, 1e-3].choose(rng).unwrap()),
            ParamType::Boolean => json!(rng.random_bool(0.5)),
            ParamType::Array(items) => Value::Array((0..2).map(|_| value_for(rng, name, items)).collect()),
            ParamType::Object => json!({"note": "context"}),
        }
    }

    /// A well-typed call: required parameters always, optional ones with
    /// probability one half.
    pub fn valid_call(rng: &mut StdRng, spec: &ToolSpec) -> ToolCall {
        let mut args = Map::new();
        for p in &spec.parameters {
            if p.required || rng.random_bool(0.5) {
                args.insert(p.name.clone(), value_for(rng, &p.name, &p.ty));
            }
        }
        ToolCall::new(spec.name.clone(), Value::Object(args))
    }

    /// Demo specs sorted by name, without the blocking tools.
    pub fn callable_specs(hub: &Hub) -> Vec<ToolSpec> {
        let mut specs: Vec<ToolSpec> = hub
            .registry()
            .entries()
            .iter()
            .map(|e| e.spec.clone())
            .filter(|s| !BLOCKING.contains(&s.name.as_str()))
            .collect();
        specs.sort_by(|a, b| a.name.cmp(&b.name));
        specs
    }
}

pub mod wire {
    use std::sync::Arc;
    use std::time::Duration;

    use serde_json::Value;
    use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt};
    use toolhub::{Hub, ManualClock};

    pub const SESSION: &str = "wire/session.json";

    pub struct Exchange {
        pub note: String,
        pub send: String,
        pub expect: Option<String>,
    }

    pub fn load_session() -> Vec<Exchange> {
        let v: Value = serde_json::from_str(&super::fixture(SESSION)).unwrap();
        v["exchanges"]
            .as_array()
            .unwrap()
            .iter()
            .map(|e| Exchange {
                note: e["note"].as_str().unwrap().to_string(),
                send: e["send"].as_str().unwrap().to_string(),
                expect: e["expect"].as_str().map(str::to_string),
            })
            .collect()
    }

    pub fn save_session(exchanges: &[Exchange]) {
        let rows: Vec<Value> =
            exchanges.iter().map(|e| serde_json::json!({"note": e.note, "send": e.send, "expect": e.expect})).collect();
        let path = format!("{}/fixtures/{SESSION}", env!("CARGO_MANIFEST_DIR"));
        let text = serde_json::to_string_pretty(&serde_json::json!({ "exchanges": rows })).unwrap();
        std::fs::write(path, text + "\n").unwrap();
    }

    /// Demo hub whose clock never moves, so every duration is zero.
    pub fn frozen_demo_hub() -> Hub {
        let hub =
            Hub::builder().backend(Arc::new(super::demo::demo_backend())).clock(Arc::new(ManualClock::new())).build();
        toolhub::demo::install_demo_pack(&hub).unwrap();
        hub
    }

    /// Body of a `Content-Length` frame.
    pub fn body(frame: &str) -> &str {
        frame.split_once("\r\n\r\n").map_or(frame, |(_, b)| b)
    }

    /// Reads one raw frame, header included, byte for byte.
    pub async fn read_frame<R: AsyncRead + Unpin>(reader: &mut R) -> String {
        let mut raw = Vec::new();
        let mut byte = [0u8; 1];
        while !raw.ends_with(b"\r\n\r\n") {
            reader.read_exact(&mut byte).await.expect("header byte");
            raw.push(byte[0]);
        }
        let header = String::from_utf8(raw.clone()).unwrap();
        let len: usize = header.trim().strip_prefix("Content-Length: ").expect("length header").parse().unwrap();
        let mut rest = vec![0u8; len];
        reader.read_exact(&mut rest).await.unwrap();
        raw.extend(rest);
        String::from_utf8(raw).unwrap()
    }

    /// Plays the exchanges over one framed stream and returns each reply.
    pub async fn replay_framed<R, W>(mut reader: R, mut writer: W, exchanges: &[Exchange]) -> Vec<Option<String>>
    where
        R: AsyncRead + Unpin,
        W: AsyncWrite + Unpin,
    {
        let mut out = Vec::new();
        for e in exchanges {
            writer.write_all(e.send.as_bytes()).await.unwrap();
            writer.flush().await.unwrap();
            out.push(match e.expect {
                Some(_) => Some(
                    tokio::time::timeout(Duration::from_secs(5), read_frame(&mut reader))
                        .await
                        .unwrap_or_else(|_| panic!("no reply to '{}'", e.note)),
                ),
                None => None,
            });
        }
        out
    }
}

pub mod expert {
    use std::sync::Arc;
    use std::time::{Duration, Instant};

    use serde_json::{json, Value};
    use toolhub::expert::tools::attach_expert;
    use toolhub::expert::{serve_expert, ExpertQueue, ExpertServer, HttpExpert};
    use toolhub::{Hub, ToolResult};

    pub async fn loopback_server(queue: Arc<ExpertQueue>) -> ExpertServer {
        serve_expert(queue, "127.0.0.1:0").await.unwrap()
    }

    /// Polls the pending list over HTTP until a request shows up, then
    /// claims and answers it.
    pub async fn answer_first_pending(base: &str, expert: &str, verdict: &str, text: &str) -> u64 {
        let http = reqwest::Client::new();
        let id = loop {
            let pending: Value =
                http.get(format!("{base}/api/requests?status=pending")).send().await.unwrap().json().await.unwrap();
            if let Some(id) = pending.as_array().and_then(|a| a.first()).and_then(|r| r["id"].as_u64()) {
                break id;
            }
            tokio::time::sleep(Duration::from_millis(5)).await;
        };
        let claim = http
            .post(format!("{base}/api/requests/{id}/claim"))
            .json(&json!({"expert_id": expert}))
            .send()
            .await
            .unwrap();
        assert_eq!(claim.status(), 200);
        let answer = http
            .post(format!("{base}/api/requests/{id}/response"))
            .json(&json!({"verdict": verdict, "text": text, "expert_id": expert}))
            .send()
            .await
            .unwrap();
        assert_eq!(answer.status(), 200);
        id
    }

    /// A consult tool call through the HTTP client, answered over HTTP by a
    /// concurrent task. Returns the result and the wall time of the call.
    pub async fn consult_round_trip() -> (ToolResult, Duration) {
        let server = loopback_server(Arc::new(ExpertQueue::new())).await;
        let base = server.url();
        let hub = Hub::new();
        attach_expert(&hub, Arc::new(HttpExpert::new(base.clone()))).unwrap();
        let started = Instant::now();
        let human =
            tokio::spawn(async move { answer_first_pending(&base, "chemist-1", "approve", "Looks good.").await });
        let result = hub
            .call_json(
                "consult_human_expert",
                json!({"question": "Advance CPD-006?", "context": {"ids": ["CPD-006"]}, "timeout_seconds": 30}),
            )
            .await;
        let elapsed = started.elapsed();
        human.await.unwrap();
        server.shutdown().await;
        (result, elapsed)
    }

    #[derive(Debug, Default)]
    pub struct RaceTally {
        pub claims_ok: usize,
        pub claims_conflict: usize,
        pub answers_ok: usize,
        pub answers_conflict: usize,
        pub winner_recorded: bool,
    }

    /// `n` experts claim and answer the same request at once over HTTP.
    pub async fn race(base: &str, queue: &ExpertQueue, n: usize) -> RaceTally {
        let id = queue.create("Which candidate first?", Value::Null, Some(60.0)).unwrap().id;
        let http = reqwest::Client::new();
        let barrier = Arc::new(tokio::sync::Barrier::new(n));
        let tasks: Vec<_> = (0..n)
            .map(|i| {
                let (http, barrier, base) = (http.clone(), barrier.clone(), base.to_string());
                tokio::spawn(async move {
                    let expert = format!("expert-{i}");
                    barrier.wait().await;
                    let claim = http
                        .post(format!("{base}/api/requests/{id}/claim"))
                        .json(&json!({"expert_id": expert}))
                        .send()
                        .await
                        .unwrap()
                        .status()
                        .as_u16();
                    let answer = http
                        .post(format!("{base}/api/requests/{id}/response"))
                        .json(&json!({"verdict": "free-text", "text": format!("answer from {expert}"), "expert_id": expert}))
                        .send()
                        .await
                        .unwrap()
                        .status()
                        .as_u16();
                    (expert, claim, answer)
                })
            })
            .collect();
        let mut tally = RaceTally::default();
        let mut winner = None;
        for t in tasks {
            let (expert, claim, answer) = t.await.unwrap();
            match claim {
                200 => tally.claims_ok += 1,
                409 => tally.claims_conflict += 1,
                other => panic!("claim status {other}"),
            }
            match answer {
                200 => {
                    tally.answers_ok += 1;
                    winner = Some(expert);
                }
                409 => tally.answers_conflict += 1,
                other => panic!("answer status {other}"),
            }
        }
        let recorded = queue.response(id).unwrap();
        tally.winner_recorded = winner.as_deref() == Some(recorded.expert_id.as_str())
            && recorded.text == format!("answer from {}", recorded.expert_id);
        tally
    }
}

pub mod case_study {
    use std::sync::Arc;

    use serde_json::{json, Value};
    use toolhub::demo::{install_case_study, install_demo_pack, CASE_STUDY_TOOL};
    use toolhub::expert::{ExpertQueue, LocalExpert, ResponseInput, Verdict};
    use toolhub::Hub;

    pub const GOLDEN: &str = "demo/case_study.golden.json";

    /// Runs the review workflow with a scripted expert who approves the
    /// first request. Returns the arguments, the question the expert saw and
    /// the final payload, or the error the call returned.
    pub async fn run() -> Result<Value, String> {
        let queue = Arc::new(ExpertQueue::new());
        let hub = Hub::builder().expert(Arc::new(LocalExpert::new(queue.clone()))).build();
        install_demo_pack(&hub).map_err(|e| e.message)?;
        install_case_study(&hub).map_err(|e| e.message)?;
        let mut events = queue.subscribe();
        let expert = tokio::spawn(async move {
            let ev = events.recv().await.map_err(|e| e.to_string())?;
            let answer = ResponseInput {
                verdict: Verdict::Approve,
                text: "Advance it; the ADMET profile is acceptable.".into(),
                expert_id: "chemist-1".into(),
            };
            queue.respond(ev.request.id, answer).map_err(|e| e.to_string())?;
            Ok::<_, String>(ev.request.question)
        });
        let arguments = json!({"gene_symbol": "HMGCR", "compound_id": "CPD-001", "timeout_seconds": 30});
        let result = hub.call_json(CASE_STUDY_TOOL, arguments.clone()).await;
        let output = result.outcome.map_err(|e| format!("{}: {}", e.code, e.message))?;
        let question = expert.await.map_err(|e| e.to_string())??;
        Ok(json!({"tool": CASE_STUDY_TOOL, "arguments": arguments, "question": question, "output": output}))
    }
}
