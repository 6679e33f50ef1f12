use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use proptest::prelude::*;
use serde_json::{json, Value};
use toolhub::demo::install_demo_pack;
use toolhub::refinement::optimizer::{analyze_description, optimize_argument_descriptions};
use toolhub::refinement::testgen::rule_cases;
use toolhub::refinement::{
    discover_tool, optimize_tool, prompt_role, rubric_backend, shared_sentences, with_rubric, DimensionSet,
    DiscoverConfig, OptimizeConfig, Provenance, QualityReport, Termination,
};
use toolhub::{handler_fn, ErrorCode, Hub, MockBackend, ParamType, ParameterSpec, ToolSpec};

fn hub_with(backend: MockBackend) -> Hub {
    let hub = Hub::builder().backend(Arc::new(backend)).build();
    install_demo_pack(&hub).unwrap();
    hub
}

/// A tool with the three rubric faults: short description, a parameter
/// without description, a sentence repeated in a parameter.
fn register_sloppy(hub: &Hub) {
    let spec = ToolSpec::new("shout", "Uppercases.")
        .param(ParameterSpec::new("text", ParamType::String, "Uppercases.").required())
        .param(ParameterSpec::new("suffix", ParamType::String, ""));
    hub.register_local(
        spec,
        handler_fn(|a| {
            let s = a["text"].as_str().unwrap_or_default().to_uppercase();
            let suffix = a.get("suffix").and_then(Value::as_str).unwrap_or("");
            Ok(json!({ "shouted": format!("{s}{suffix}") }))
        }),
    )
    .unwrap();
}

fn uniform(set: DimensionSet, v: f64) -> BTreeMap<String, f64> {
    set.dimensions().iter().map(|d| (d.to_string(), v)).collect()
}

/// Rubric backend whose description evaluator returns `overall[i]` in
/// round i (all dimensions equal), repeating the last value.
fn scripted(overall: Vec<f64>) -> MockBackend {
    let n = AtomicUsize::new(0);
    with_rubric(MockBackend::new("scripted").when_fn(move |p| {
        (prompt_role(p) == Some("DescriptionQualityEvaluator")).then(|| {
            let i = n.fetch_add(1, Ordering::SeqCst).min(overall.len() - 1);
            json!({ "scores": uniform(DimensionSet::Optimizer, overall[i]) }).to_string()
        })
    }))
}

fn overalls(reports: &[QualityReport]) -> Vec<f64> {
    reports.iter().map(|r| r.overall).collect()
}

#[tokio::test]
async fn rubric_optimization_repairs_a_sloppy_spec() {
    let hub = hub_with(rubric_backend("rubric"));
    register_sloppy(&hub);
    let out = optimize_tool(&hub, "shout", &OptimizeConfig::default()).await.unwrap();
    assert_eq!(out.rounds_used, 1);
    assert_eq!(out.terminated_by, Termination::Threshold);
    assert_eq!(out.reports[0].overall, 10.0);
    assert_eq!(out.optimized.description, "Uppercases. Returns shouted.");
    assert_eq!(out.optimized.parameters[1].description, "The suffix argument (string).");
    assert!(shared_sentences(&out.optimized).is_empty());
    assert!(hub.registry().spec("shout").unwrap().description == "Uppercases.", "registry untouched");
}

#[tokio::test]
async fn threshold_met_in_round_one_stops() {
    let hub = hub_with(scripted(vec![9.0]));
    let out = optimize_tool(&hub, "echo", &OptimizeConfig::default()).await.unwrap();
    assert_eq!((out.rounds_used, out.terminated_by), (1, Termination::Threshold));
}

#[tokio::test]
async fn never_reaching_threshold_stops_after_three_rounds() {
    let hub = hub_with(scripted(vec![5.0, 6.0, 7.0]));
    let out = optimize_tool(&hub, "echo", &OptimizeConfig::default()).await.unwrap();
    assert_eq!((out.rounds_used, out.terminated_by), (3, Termination::MaxRounds));
    assert_eq!(overalls(&out.reports), [5.0, 6.0, 7.0]);
    assert_eq!(out.best_round, 3);
}

#[tokio::test]
async fn zero_threshold_needs_one_round() {
    let hub = hub_with(scripted(vec![0.0]));
    let config = OptimizeConfig { threshold: 0.0, ..Default::default() };
    let out = optimize_tool(&hub, "echo", &config).await.unwrap();
    assert_eq!((out.rounds_used, out.terminated_by), (1, Termination::Threshold));
}

#[tokio::test]
async fn best_round_wins_over_later_regressions() {
    let hub = hub_with(scripted(vec![7.0, 4.0, 5.0]));
    let out = optimize_tool(&hub, "echo", &OptimizeConfig::default()).await.unwrap();
    assert_eq!(out.best_round, 1);
    assert_eq!(out.best_report().overall, 7.0);
}

#[tokio::test]
async fn later_rounds_use_feedback_cases() {
    let backend = Arc::new(scripted(vec![5.0]));
    let hub = Hub::builder().backend(backend.clone()).build();
    install_demo_pack(&hub).unwrap();
    optimize_tool(&hub, "range_check", &OptimizeConfig::default()).await.unwrap();
    let generator_prompts = backend.prompts().iter().filter(|p| p.starts_with("ROLE: TestCaseGenerator")).count();
    assert_eq!(generator_prompts, 2, "rounds two and three ask for targeted cases");
}

#[tokio::test]
async fn backend_failure_aborts_with_partial_outcome() {
    let n = AtomicUsize::new(0);
    let backend = with_rubric(MockBackend::new("flaky").when_fn(move |p| {
        (prompt_role(p) == Some("DescriptionQualityEvaluator")).then(|| match n.fetch_add(1, Ordering::SeqCst) {
            0 => json!({ "scores": uniform(DimensionSet::Optimizer, 5.0) }).to_string(),
            _ => "not a report".into(),
        })
    }));
    let hub = hub_with(backend);
    let err = optimize_tool(&hub, "echo", &OptimizeConfig::default()).await.unwrap_err();
    assert_eq!(err.code, ErrorCode::ExecutionFailed);
    let detail = err.detail.unwrap();
    assert_eq!(detail["round"], 2);
    assert_eq!(detail["partial"]["rounds_used"], 1);
}

#[tokio::test]
async fn analyzer_mentions_observed_fields_and_flags_all_errors() {
    let hub = hub_with(rubric_backend("rubric"));
    let ctx = hub.caller().context();
    let spec = hub.registry().spec("string_stats").unwrap();
    let mut batch = rule_cases(&spec, None, Provenance::Initial);
    let err = analyze_description(hub.backends(), "rubric", &spec, &batch).await.unwrap_err();
    assert_eq!(err.code, ErrorCode::ExecutionFailed, "unexecuted batch is rejected");

    batch.execute(&ctx, 4).await;
    let p = analyze_description(hub.backends(), "rubric", &spec, &batch).await.unwrap();
    assert!(!p.low_confidence);
    for field in ["characters", "unique_words"] {
        assert!(p.text.contains(field), "{}", p.text);
    }

    batch.cases.retain(|c| !c.purpose.expects_success());
    batch.execute(&ctx, 4).await;
    assert!(analyze_description(hub.backends(), "rubric", &spec, &batch).await.unwrap().low_confidence);
}

#[tokio::test]
async fn argument_descriptions_drop_shared_sentences() {
    let hub = hub_with(rubric_backend("rubric"));
    let ctx = hub.caller().context();
    let spec = ToolSpec::new("triple", "Combines three values. Fast.")
        .param(ParameterSpec::new("a", ParamType::String, "Combines three values. First value.").required())
        .param(ParameterSpec::new("b", ParamType::String, "Second value.").required())
        .param(ParameterSpec::new("c", ParamType::String, "Third value.").required());
    hub.register_local(spec.clone(), handler_fn(|_| Ok(json!({})))).unwrap();
    let mut batch = rule_cases(&spec, None, Provenance::Initial);
    batch.execute(&ctx, 4).await;
    let out = optimize_argument_descriptions(hub.backends(), "rubric", &spec, &spec.description, &batch).await.unwrap();
    let want: BTreeMap<String, String> = [("a", "First value."), ("b", "Second value."), ("c", "Third value.")]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    assert_eq!(out, want);
}

#[tokio::test]
async fn optimize_unknown_tool_is_not_found() {
    let hub = hub_with(rubric_backend("rubric"));
    let err = optimize_tool(&hub, "nope", &OptimizeConfig::default()).await.unwrap_err();
    assert_eq!(err.code, ErrorCode::ToolNotFound);
}

const ECHO_SPEC: &str = r#"{"name": "echo_text", "description": "Returns the given text unchanged.",
  "parameters": [{"name": "text", "type": "string", "description": "Text to return.", "required": true}],
  "return_schema": {"text": "string"}, "tags": ["utility"]}"#;

const ECHO_PROGRAM: &str = r#"{"program": {"steps": [{"transform": "identity", "input": "$text", "as": "t"}],
  "output": {"text": "$t"}}}"#;

fn discover_backend() -> MockBackend {
    with_rubric(
        MockBackend::new("gen")
            .when("ROLE: SpecificationGenerator", ECHO_SPEC)
            .when("ROLE: ImplementationGenerator", ECHO_PROGRAM),
    )
}

#[tokio::test]
async fn discover_echo_reaches_target_and_round_trips() {
    let hub = hub_with(discover_backend());
    let pkg = discover_tool(&hub, "a tool that echoes text", &DiscoverConfig::default()).await.unwrap();
    assert!(pkg.quality.overall >= 9.0, "{:?}", pkg.quality);
    assert!(pkg.accepted());
    assert_eq!(pkg.metadata["rounds_used"], 1);
    assert_eq!(pkg.dependencies, Vec::<String>::new());
    assert!(pkg.metadata["references"].as_array().unwrap().contains(&json!("echo")));

    let dir = tempfile::tempdir().unwrap();
    let root = pkg.write(dir.path()).unwrap();
    for f in ["config.json", "implementation.json", "dependencies.txt"] {
        assert!(root.join(f).is_file(), "{f}");
    }
    let fresh = Hub::new();
    let report = fresh.load_manifest(dir.path()).unwrap();
    assert_eq!(report.loaded, ["echo_text"]);
    let r = fresh.call_json("echo_text", json!({"text": "hi"})).await;
    assert_eq!(r.outcome.unwrap(), json!({"text": "hi"}));
    let loaded = fresh.registry().get("echo_text").unwrap();
    assert_eq!(loaded.spec.settings["quality"]["overall"], json!(pkg.quality.overall));
}

#[tokio::test]
async fn discovered_programs_can_call_registered_tools() {
    let spec = r#"{"name": "formula_mass", "description": "Molecular weight of a chemical formula in g/mol.",
      "parameters": [{"name": "formula", "type": "string", "description": "Formula such as C9H8O4", "required": true}],
      "return_schema": {"grams_per_mole": "number"}}"#;
    let program = r#"{"program": {"steps": [{"call": "molecular_weight_calculator",
      "arguments": {"formula": "$formula"}, "as": "mw"}], "output": {"grams_per_mole": "$mw.molecular_weight"}}}"#;
    let backend = with_rubric(
        MockBackend::new("gen")
            .when("ROLE: SpecificationGenerator", spec)
            .when("ROLE: ImplementationGenerator", program),
    );
    let hub = hub_with(backend);
    let pkg = discover_tool(&hub, "molecular mass of a formula", &DiscoverConfig::default()).await.unwrap();
    assert_eq!(pkg.dependencies, ["molecular_weight_calculator"]);
    assert_eq!(pkg.quality.overall, 10.0);
    pkg.install(&hub).unwrap();
    let r = hub.call_json("formula_mass", json!({"formula": "H2O"})).await;
    assert_eq!(r.outcome.unwrap(), json!({"grams_per_mole": 18.015}));
}

#[tokio::test]
async fn invalid_spec_is_retried_once_then_fails_at_specification() {
    let backend =
        Arc::new(with_rubric(MockBackend::new("gen").when("ROLE: SpecificationGenerator", r#"{"name": "Bad Name"}"#)));
    let hub = Hub::builder().backend(backend.clone()).build();
    install_demo_pack(&hub).unwrap();
    let err = discover_tool(&hub, "anything", &DiscoverConfig::default()).await.unwrap_err();
    assert_eq!(err.code, ErrorCode::ExecutionFailed);
    assert_eq!(err.detail.unwrap()["stage"], "specification");
    let attempts = backend.prompts().iter().filter(|p| p.starts_with("ROLE: SpecificationGenerator")).count();
    assert_eq!(attempts, 2);
}

#[tokio::test]
async fn broken_program_fails_at_implementation() {
    let backend = with_rubric(
        MockBackend::new("gen")
            .when("ROLE: SpecificationGenerator", ECHO_SPEC)
            .when("ROLE: ImplementationGenerator", r#"{"program": {"steps": [{"call": "missing_tool"}]}}"#),
    );
    let hub = hub_with(backend);
    let err = discover_tool(&hub, "echo", &DiscoverConfig::default()).await.unwrap_err();
    assert_eq!(err.detail.unwrap()["stage"], "implementation");
}

#[tokio::test]
async fn weak_candidates_halt_at_max_rounds_and_are_not_accepted() {
    // Ignores its argument and returns a number where text is declared.
    let program =
        r#"{"program": {"steps": [{"transform": "length", "input": "fixed", "as": "t"}], "output": {"text": "$t"}}}"#;
    let backend = Arc::new(with_rubric(
        MockBackend::new("gen")
            .when("ROLE: SpecificationGenerator", ECHO_SPEC)
            .when("ROLE: ImplementationGenerator", program),
    ));
    let hub = Hub::builder().backend(backend.clone()).build();
    install_demo_pack(&hub).unwrap();
    let pkg = discover_tool(&hub, "echo", &DiscoverConfig::default()).await.unwrap();
    assert_eq!(pkg.metadata["rounds_used"], 3);
    assert_eq!(pkg.metadata["terminated_by"], "max-rounds");
    assert!(!pkg.accepted());
    // 0.3*0 + 0.25*10 + 0.15*8 + 0.1*10 + 0.2*0, the unused parameter costing 2.
    assert_eq!(pkg.quality.scores["maintainability"], 8.0);
    assert_eq!(pkg.quality.overall, 4.7);
    assert!(backend.prompts().iter().any(|p| p.contains("### FEEDBACK")));
}

fn sentence() -> impl Strategy<Value = String> {
    prop::sample::select(vec![
        "Counts words.",
        "Fast.",
        "Returns a number.",
        "Input text.",
        "Uses UTF-8.",
        "Never fails.",
    ])
    .prop_map(str::to_string)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn optimized_params_never_repeat_tool_sentences(
        tool in prop::collection::vec(sentence(), 1..4),
        params in prop::collection::vec(prop::collection::vec(sentence(), 0..4), 1..4),
    ) {
        let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap();
        let hub = Hub::builder().backend(Arc::new(rubric_backend("rubric"))).build();
        let mut spec = ToolSpec::new("subject", tool.join(" "));
        for (i, p) in params.iter().enumerate() {
            spec = spec.param(ParameterSpec::new(format!("p{i}"), ParamType::String, p.join(" ")));
        }
        hub.register_local(spec, handler_fn(|_| Ok(json!({})))).unwrap();
        let out = rt.block_on(optimize_tool(&hub, "subject", &OptimizeConfig::default())).unwrap();
        prop_assert!(shared_sentences(&out.optimized).is_empty());
        prop_assert!(out.optimized.validate().is_ok());
    }

    #[test]
    fn optimizer_halts_and_keeps_the_best(
        scores in prop::collection::vec(0u8..=10, 1..6),
        threshold in 0u8..=11,
        max_rounds in 1usize..5,
    ) {
        let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap();
        let overall: Vec<f64> = scores.iter().map(|s| *s as f64).collect();
        let hub = Hub::builder().backend(Arc::new(scripted(overall))).build();
        install_demo_pack(&hub).unwrap();
        let config = OptimizeConfig { threshold: threshold as f64, max_rounds, ..Default::default() };
        let out = rt.block_on(optimize_tool(&hub, "echo", &config)).unwrap();
        prop_assert!(out.rounds_used >= 1 && out.rounds_used <= max_rounds);
        let last = out.reports.last().unwrap().overall;
        match out.terminated_by {
            Termination::Threshold => prop_assert!(last >= config.threshold),
            Termination::MaxRounds => prop_assert_eq!(out.rounds_used, max_rounds),
        }
        let best = out.best_report().overall;
        prop_assert!(best >= out.reports[0].overall);
        prop_assert!(out.reports.iter().all(|r| r.overall <= best));
    }
}
