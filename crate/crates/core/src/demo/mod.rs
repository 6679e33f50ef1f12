//! A deterministic, offline tool pack spanning the common tool categories
//! (software packages, databases, APIs, ML models, embedding stores,
//! agents, human expert feedback). Every handler is pure over the fixture
//! files shipped in `fixtures/demo`; agentic tools need a backend and the
//! expert tools an expert service.
//!
//! Fixture formats (`fixtures/demo/data`):
//!
//! | file            | shape                                                   |
//! |-----------------|---------------------------------------------------------|
//! | compounds.json  | id -> {name, formula, molecular_weight, smiles, class}  |
//! | neighbors.json  | id -> [{compound_id, similarity}] sorted by similarity  |
//! | admet.json      | id -> property record                                   |
//! | targets.json    | gene symbol -> {name, accession, function, pathways, tissue} |
//! | diseases.json   | disease -> [{gene_symbol, score}]                       |
//! | drugs.json      | drug name -> {indications, approval_year, route}        |
//! | binding.json    | "compound|gene" -> pKd                                  |
//! | literature.json | [{id, title, year, journal, abstract}]                  |
//! | packages.json   | package -> {version, summary, install, docs_url}        |
//! | units.json      | unit -> {dimension, factor to the SI base}              |
//! | documents.json  | [{id, text}] for the embedding store                    |

pub mod expr;

use std::collections::{BTreeSet, HashMap};
use std::path::Path;
use std::sync::OnceLock;

use serde_json::{json, Map, Value};

use crate::composer::CompositePlan;
use crate::error::ToolError;
use crate::expert::tools::register_expert_handlers;
use crate::finder::embedding::{cosine, fnv1a, Embedder, HashingEmbedder, Vector};
use crate::handler::handler_fn;
use crate::hub::Hub;
use crate::protocol::Arguments;
use crate::registry::{ManifestReport, Registry};

macro_rules! fixture {
    ($path:literal) => {
        ($path, include_str!(concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/demo/", $path)))
    };
}

/// Every demo file, relative to the pack root.
pub const DEMO_FILES: &[(&str, &str)] = &[
    fixture!("manifest.json"),
    fixture!("case_study.plan.json"),
    fixture!("agents/experimental_design_scorer.json"),
    fixture!("agents/hypothesis_generator.json"),
    fixture!("agents/summarizer.json"),
    fixture!("data/admet.json"),
    fixture!("data/binding.json"),
    fixture!("data/compounds.json"),
    fixture!("data/diseases.json"),
    fixture!("data/documents.json"),
    fixture!("data/drugs.json"),
    fixture!("data/literature.json"),
    fixture!("data/neighbors.json"),
    fixture!("data/packages.json"),
    fixture!("data/targets.json"),
    fixture!("data/units.json"),
    fixture!("specs/arithmetic_eval.json"),
    fixture!("specs/consult_human_expert.json"),
    fixture!("specs/echo.json"),
    fixture!("specs/embedding_database_search.json"),
    fixture!("specs/embedding_text_similarity.json"),
    fixture!("specs/experimental_design_scorer.json"),
    fixture!("specs/get_expert_response.json"),
    fixture!("specs/get_expert_status.json"),
    fixture!("specs/get_package_info.json"),
    fixture!("specs/hypothesis_generator.json"),
    fixture!("specs/mock_admet_lookup.json"),
    fixture!("specs/mock_binding_predictor.json"),
    fixture!("specs/mock_compound_lookup.json"),
    fixture!("specs/mock_disease_targets.json"),
    fixture!("specs/mock_drug_indications.json"),
    fixture!("specs/mock_literature_search.json"),
    fixture!("specs/mock_similarity_search.json"),
    fixture!("specs/mock_target_profile.json"),
    fixture!("specs/mock_toxicity_classifier.json"),
    fixture!("specs/molecular_weight_calculator.json"),
    fixture!("specs/range_check.json"),
    fixture!("specs/sequence_gc_content.json"),
    fixture!("specs/string_stats.json"),
    fixture!("specs/summarizer.json"),
    fixture!("specs/unit_converter.json"),
];

pub const CASE_STUDY_TOOL: &str = "lipid_candidate_review";

pub fn demo_file(rel: &str) -> Option<&'static str> {
    DEMO_FILES.iter().find(|(p, _)| *p == rel).map(|(_, body)| *body)
}

fn data(name: &str) -> &'static Value {
    static CACHE: OnceLock<HashMap<&'static str, Value>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| {
        DEMO_FILES
            .iter()
            .filter_map(|(p, body)| {
                let key = p.strip_prefix("data/")?.strip_suffix(".json")?;
                Some((key, serde_json::from_str(body).expect("demo fixture is valid JSON")))
            })
            .collect()
    });
    cache.get(name).expect("known demo fixture")
}

fn fail(message: impl Into<String>) -> ToolError {
    ToolError::execution(message)
}

fn str_arg<'a>(args: &'a Arguments, name: &str) -> &'a str {
    args.get(name).and_then(Value::as_str).unwrap_or_default()
}

fn num_arg(args: &Arguments, name: &str) -> f64 {
    args.get(name).and_then(Value::as_f64).unwrap_or_default()
}

fn count_arg(args: &Arguments, name: &str, default: i64) -> Result<usize, ToolError> {
    let n = args.get(name).and_then(Value::as_i64).unwrap_or(default);
    usize::try_from(n).map_err(|_| fail(format!("{name} must not be negative")))
}

fn round_to(x: f64, places: i32) -> f64 {
    let f = 10f64.powi(places);
    (x * f).round() / f
}

/// Looks up `key` in an object fixture or fails listing the known keys.
fn lookup<'a>(table: &'a Value, key: &str, what: &str) -> Result<&'a Map<String, Value>, ToolError> {
    match table.get(key).and_then(Value::as_object) {
        Some(record) => Ok(record),
        None => {
            let known: Vec<&String> = table.as_object().map(|m| m.keys().collect()).unwrap_or_default();
            Err(fail(format!("no {what} '{key}' in the fixture table")).with_detail(json!({ "known": known })))
        }
    }
}

fn with_key(key: &str, key_value: &str, record: &Map<String, Value>) -> Value {
    let mut out = Map::new();
    out.insert(key.into(), json!(key_value));
    out.extend(record.iter().map(|(k, v)| (k.clone(), v.clone())));
    Value::Object(out)
}

fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).map(str::to_lowercase).collect()
}

fn string_stats(args: &Arguments) -> Result<Value, ToolError> {
    let text = str_arg(args, "text");
    let ws: Vec<&str> = text.split_whitespace().collect();
    let unique: BTreeSet<String> = ws.iter().map(|w| w.to_lowercase()).collect();
    Ok(json!({
        "characters": text.chars().count(),
        "words": ws.len(),
        "lines": text.lines().count(),
        "unique_words": unique.len(),
    }))
}

fn range_check(args: &Arguments) -> Result<Value, ToolError> {
    let (v, lo, hi) = (num_arg(args, "value"), num_arg(args, "min"), num_arg(args, "max"));
    if lo > hi {
        return Err(fail(format!("min ({lo}) exceeds max ({hi})")));
    }
    let distance = if v < lo {
        lo - v
    } else if v > hi {
        v - hi
    } else {
        0.0
    };
    Ok(json!({ "value": args["value"], "in_range": distance == 0.0, "distance": distance }))
}

fn arithmetic_eval(args: &Arguments) -> Result<Value, ToolError> {
    let src = str_arg(args, "expression");
    let value = expr::evaluate(src).map_err(|e| fail(format!("cannot evaluate '{src}': {e}")))?;
    Ok(json!({ "expression": src, "value": value }))
}

fn unit_converter(args: &Arguments) -> Result<Value, ToolError> {
    let units = data("units");
    let (from, to) = (str_arg(args, "from_unit"), str_arg(args, "to_unit"));
    let a = lookup(units, from, "unit")?;
    let b = lookup(units, to, "unit")?;
    let (da, db) = (&a["dimension"], &b["dimension"]);
    if da != db {
        return Err(fail(format!("cannot convert {from} ({da}) to {to} ({db})")));
    }
    let raw = num_arg(args, "value") * a["factor"].as_f64().unwrap_or(1.0) / b["factor"].as_f64().unwrap_or(1.0);
    // Twelve significant digits hide the binary noise of the factors.
    let value: f64 = format!("{raw:.11e}").parse().expect("formatted float parses");
    Ok(json!({ "value": value, "unit": to, "dimension": da }))
}

const ATOMIC_WEIGHTS: &[(&str, f64)] = &[
    ("H", 1.008),
    ("Li", 6.94),
    ("B", 10.81),
    ("C", 12.011),
    ("N", 14.007),
    ("O", 15.999),
    ("F", 18.998),
    ("Na", 22.990),
    ("Mg", 24.305),
    ("Si", 28.085),
    ("P", 30.974),
    ("S", 32.06),
    ("Cl", 35.45),
    ("K", 39.098),
    ("Ca", 40.078),
    ("Fe", 55.845),
    ("Zn", 65.38),
    ("Se", 78.971),
    ("Br", 79.904),
    ("I", 126.904),
];

/// Parses a formula with optional parenthesized groups, e.g. `Ca(OH)2`.
/// Returns (weight, atom count).
pub fn formula_weight(formula: &str) -> Result<(f64, u64), String> {
    let bytes = formula.as_bytes();
    let mut stack: Vec<(f64, u64)> = vec![(0.0, 0)];
    let mut i = 0;
    let read_count = |i: &mut usize| -> Result<u64, String> {
        let start = *i;
        while *i < bytes.len() && bytes[*i].is_ascii_digit() {
            *i += 1;
        }
        if start == *i {
            return Ok(1);
        }
        match formula[start..*i].parse::<u64>() {
            Ok(n) if n > 0 && n <= 100_000 => Ok(n),
            _ => Err(format!("bad count '{}'", &formula[start..*i])),
        }
    };
    while i < bytes.len() {
        match bytes[i] {
            b'(' => {
                stack.push((0.0, 0));
                i += 1;
            }
            b')' => {
                i += 1;
                let n = read_count(&mut i)?;
                let (w, c) = stack.pop().filter(|_| !stack.is_empty()).ok_or("unbalanced ')'")?;
                let top = stack.last_mut().ok_or("unbalanced ')'")?;
                top.0 += w * n as f64;
                top.1 += c * n;
            }
            c if c.is_ascii_uppercase() => {
                let start = i;
                i += 1;
                if i < bytes.len() && bytes[i].is_ascii_lowercase() {
                    i += 1;
                }
                let symbol = &formula[start..i];
                let weight = ATOMIC_WEIGHTS
                    .iter()
                    .find(|(s, _)| *s == symbol)
                    .map(|(_, w)| *w)
                    .ok_or_else(|| format!("unknown element '{symbol}'"))?;
                let n = read_count(&mut i)?;
                let top = stack.last_mut().expect("stack never empty");
                top.0 += weight * n as f64;
                top.1 += n;
            }
            other => return Err(format!("unexpected '{}' at position {i}", other as char)),
        }
    }
    if stack.len() != 1 {
        return Err("unbalanced '('".into());
    }
    let (w, c) = stack[0];
    if c == 0 {
        return Err("formula is empty".into());
    }
    Ok((w, c))
}

fn molecular_weight(args: &Arguments) -> Result<Value, ToolError> {
    let formula = str_arg(args, "formula").trim();
    let (w, atoms) = formula_weight(formula).map_err(|e| fail(format!("cannot parse formula '{formula}': {e}")))?;
    Ok(json!({ "formula": formula, "molecular_weight": round_to(w, 3), "atoms": atoms }))
}

fn gc_content(args: &Arguments) -> Result<Value, ToolError> {
    let seq = str_arg(args, "sequence").trim().to_ascii_uppercase();
    if seq.is_empty() {
        return Err(fail("sequence is empty"));
    }
    if let Some((i, c)) = seq.char_indices().find(|(_, c)| !matches!(c, 'A' | 'C' | 'G' | 'T' | 'U' | 'N')) {
        return Err(fail(format!("invalid nucleotide '{c}' at position {i}")));
    }
    let gc = seq.chars().filter(|c| matches!(c, 'G' | 'C')).count();
    Ok(json!({ "length": seq.len(), "gc_fraction": round_to(gc as f64 / seq.len() as f64, 6) }))
}

fn package_info(args: &Arguments) -> Result<Value, ToolError> {
    let name = str_arg(args, "package").trim().to_lowercase();
    Ok(with_key("package", &name, lookup(data("packages"), &name, "package")?))
}

fn literature_search(args: &Arguments) -> Result<Value, ToolError> {
    let query = str_arg(args, "query");
    let limit = count_arg(args, "limit", 5)?;
    let terms: BTreeSet<String> = words(query).into_iter().filter(|w| w.len() > 2).collect();
    let mut hits: Vec<(i64, i64, String, Value)> = Vec::new();
    for paper in data("literature").as_array().into_iter().flatten() {
        let text = format!(
            "{} {}",
            paper["title"].as_str().unwrap_or_default(),
            paper["abstract"].as_str().unwrap_or_default()
        );
        let vocab: BTreeSet<String> = words(&text).into_iter().collect();
        let score = terms.iter().filter(|t| vocab.contains(*t)).count() as i64;
        if score > 0 {
            let year = paper["year"].as_i64().unwrap_or_default();
            let id = paper["id"].as_str().unwrap_or_default().to_string();
            let row = json!({
                "id": id,
                "title": paper["title"],
                "year": year,
                "journal": paper["journal"],
                "score": score,
            });
            hits.push((score, year, id, row));
        }
    }
    hits.sort_by(|a, b| b.0.cmp(&a.0).then(b.1.cmp(&a.1)).then(a.2.cmp(&b.2)));
    let results: Vec<Value> = hits.into_iter().take(limit).map(|h| h.3).collect();
    Ok(json!({ "query": query, "results": results }))
}

fn target_profile(args: &Arguments) -> Result<Value, ToolError> {
    let gene = str_arg(args, "gene_symbol").trim().to_uppercase();
    Ok(with_key("gene_symbol", &gene, lookup(data("targets"), &gene, "gene symbol")?))
}

fn compound_lookup(args: &Arguments) -> Result<Value, ToolError> {
    let id = str_arg(args, "compound_id").trim().to_uppercase();
    Ok(with_key("compound_id", &id, lookup(data("compounds"), &id, "compound")?))
}

fn admet_lookup(args: &Arguments) -> Result<Value, ToolError> {
    let id = str_arg(args, "compound_id").trim().to_uppercase();
    Ok(with_key("compound_id", &id, lookup(data("admet"), &id, "compound")?))
}

fn similarity_search(args: &Arguments) -> Result<Value, ToolError> {
    let id = str_arg(args, "compound_id").trim().to_uppercase();
    let k = count_arg(args, "top_k", 3)?;
    lookup(data("compounds"), &id, "compound")?;
    let neighbors: Vec<Value> = data("neighbors")[&id]
        .as_array()
        .into_iter()
        .flatten()
        .take(k)
        .map(|n| {
            let nid = n["compound_id"].as_str().unwrap_or_default();
            json!({
                "compound_id": nid,
                "name": data("compounds")[nid]["name"],
                "similarity": n["similarity"],
            })
        })
        .collect();
    Ok(json!({ "compound_id": id, "neighbors": neighbors }))
}

fn disease_targets(args: &Arguments) -> Result<Value, ToolError> {
    let disease = str_arg(args, "disease").trim().to_lowercase();
    let Some(targets) = data("diseases").get(&disease) else {
        let known: Vec<&String> = data("diseases").as_object().map(|m| m.keys().collect()).unwrap_or_default();
        return Err(fail(format!("no disease '{disease}' in the fixture table")).with_detail(json!({ "known": known })));
    };
    Ok(json!({ "disease": disease, "targets": targets }))
}

fn drug_indications(args: &Arguments) -> Result<Value, ToolError> {
    let drug = str_arg(args, "drug_name").trim().to_lowercase();
    Ok(with_key("drug_name", &drug, lookup(data("drugs"), &drug, "drug")?))
}

fn binding_predictor(args: &Arguments) -> Result<Value, ToolError> {
    let id = str_arg(args, "compound_id").trim().to_uppercase();
    let gene = str_arg(args, "gene_symbol").trim().to_uppercase();
    lookup(data("compounds"), &id, "compound")?;
    lookup(data("targets"), &gene, "gene symbol")?;
    let key = format!("{id}|{gene}");
    let (pkd, source) = match data("binding").get(&key).and_then(Value::as_f64) {
        Some(v) => (v, "fixture"),
        // Deterministic weak-binder baseline for pairs without a measurement.
        None => (4.0 + (fnv1a(key.as_bytes()) % 201) as f64 / 100.0, "baseline"),
    };
    Ok(json!({ "compound_id": id, "gene_symbol": gene, "predicted_pkd": round_to(pkd, 2), "source": source }))
}

fn toxicity_classifier(args: &Arguments) -> Result<Value, ToolError> {
    let smiles = str_arg(args, "smiles").trim();
    if smiles.is_empty() {
        return Err(fail("smiles is empty"));
    }
    let halogens = ["Cl", "Br", "I", "F"].iter().map(|h| smiles.matches(h).count()).sum::<usize>();
    let nitro = smiles.matches("N(=O)=O").count() + smiles.matches("[N+](=O)[O-]").count();
    let heavy = smiles.chars().filter(|c| c.is_ascii_alphabetic()).count();
    let z = -2.5 + 0.45 * halogens as f64 + 1.6 * nitro as f64 + 0.03 * heavy as f64;
    let p = round_to(1.0 / (1.0 + (-z).exp()), 4);
    Ok(json!({ "toxic": p >= 0.5, "probability": p }))
}

fn embedder() -> &'static HashingEmbedder {
    static E: OnceLock<HashingEmbedder> = OnceLock::new();
    E.get_or_init(HashingEmbedder::default)
}

fn embed(text: &str) -> Result<Vector<f64>, ToolError> {
    embedder().embed(text)
}

fn embedding_search(args: &Arguments) -> Result<Value, ToolError> {
    let q = embed(str_arg(args, "query"))?;
    let k = count_arg(args, "top_k", 3)?;
    let mut scored: Vec<(f64, &str, &str)> = Vec::new();
    for doc in data("documents").as_array().into_iter().flatten() {
        let text = doc["text"].as_str().unwrap_or_default();
        scored.push((cosine(&q, &embed(text)?), doc["id"].as_str().unwrap_or_default(), text));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)));
    let results: Vec<Value> = scored
        .into_iter()
        .take(k)
        .map(|(s, id, text)| json!({ "id": id, "text": text, "similarity": round_to(s, 6) }))
        .collect();
    Ok(json!({ "results": results }))
}

fn text_similarity(args: &Arguments) -> Result<Value, ToolError> {
    let a = embed(str_arg(args, "text_a"))?;
    let b = embed(str_arg(args, "text_b"))?;
    Ok(json!({ "similarity": round_to(cosine(&a, &b), 6) }))
}

type DemoFn = fn(&Arguments) -> Result<Value, ToolError>;

/// Handler catalog: tool name to pure implementation.
pub const DEMO_HANDLERS: &[(&str, DemoFn)] = &[
    ("echo", |a| Ok(json!({ "text": a.get("text").cloned().unwrap_or_default() }))),
    ("string_stats", string_stats),
    ("range_check", range_check),
    ("arithmetic_eval", arithmetic_eval),
    ("unit_converter", unit_converter),
    ("molecular_weight_calculator", molecular_weight),
    ("sequence_gc_content", gc_content),
    ("get_package_info", package_info),
    ("mock_literature_search", literature_search),
    ("mock_target_profile", target_profile),
    ("mock_compound_lookup", compound_lookup),
    ("mock_admet_lookup", admet_lookup),
    ("mock_similarity_search", similarity_search),
    ("mock_disease_targets", disease_targets),
    ("mock_drug_indications", drug_indications),
    ("mock_binding_predictor", binding_predictor),
    ("mock_toxicity_classifier", toxicity_classifier),
    ("embedding_database_search", embedding_search),
    ("embedding_text_similarity", text_similarity),
];

/// Adds the demo (and expert) handlers to the registry's catalog.
pub fn register_demo_handlers(registry: &Registry) {
    for (name, f) in DEMO_HANDLERS {
        let f = *f;
        registry.register_handler(*name, handler_fn(f));
    }
    register_expert_handlers(registry);
}

/// Registers every demo tool. Returns the number registered.
pub fn install_demo_pack(hub: &Hub) -> Result<usize, ToolError> {
    let report = load_demo_into(hub.registry())?;
    Ok(report.loaded.len())
}

/// Loads the embedded demo manifest, collecting per-tool failures.
pub fn load_demo_into(registry: &Registry) -> Result<ManifestReport, ToolError> {
    register_demo_handlers(registry);
    let manifest = demo_file("manifest.json").expect("demo manifest is embedded");
    let report = registry.load_manifest_from(manifest, |rel| {
        demo_file(rel).map(str::to_string).ok_or_else(|| format!("{rel} is not part of the demo pack"))
    })?;
    if let Some(first) = report.errors.first() {
        return Err(ToolError::spec(format!("demo pack entry {} failed: {}", first.file, first.error.message)));
    }
    Ok(report)
}

/// Writes the demo pack as a manifest directory.
pub fn write_demo_manifest(dir: &Path) -> Result<(), ToolError> {
    for (rel, body) in DEMO_FILES {
        let path = dir.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| fail(format!("cannot create {}: {e}", parent.display())))?;
        }
        std::fs::write(&path, body).map_err(|e| fail(format!("cannot write {}: {e}", path.display())))?;
    }
    Ok(())
}

/// The target-to-candidates review workflow over the demo pack:
/// target profile, structural neighbours, their ADMET properties in
/// parallel, then an expert verdict.
pub fn case_study_plan() -> CompositePlan {
    CompositePlan::from_json(demo_file("case_study.plan.json").expect("case study is embedded"))
        .expect("case study plan is valid")
}

pub fn install_case_study(hub: &Hub) -> Result<String, ToolError> {
    hub.compose(case_study_plan())
}
