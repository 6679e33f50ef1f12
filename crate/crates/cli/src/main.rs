mod exit;

use std::io::{IsTerminal, Read};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};
use toolhub::expert::{system_wall_clock, ExpertQueue, HttpExpert, QueueConfig};
use toolhub::refinement::{discover_tool, optimize_tool, rubric_backend, DiscoverConfig, OptimizeConfig};
use toolhub::wire::{serve, RpcService, Transport};
use toolhub::{AgentBackend, CompositePlan, HttpBackend, Hub, ListFilter, Strategy, ToolResult};

use exit::{Silent, Usage};

/// Writes a line to standard output. A closed pipe (as with `| head`) is
/// not an error worth reporting.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout().lock(), $($arg)*);
    }};
}

const DEFAULT_BIND: &str = "127.0.0.1:7400";
const DEFAULT_EXPERT_BIND: &str = "127.0.0.1:7401";

/// Register, find, call, compose and serve tools.
#[derive(Parser, Debug)]
#[command(name = "toolhub", version, about)]
struct Cli {
    /// Text-generation backend: `mock` for the offline rule-based backend,
    /// or the URL of a generation endpoint.
    #[arg(long, global = true, env = "TOOLHUB_BACKEND", default_value = "mock")]
    backend: String,

    /// Feedback server answering `consult_human_expert`.
    #[arg(long, global = true, env = "TOOLHUB_EXPERT_URL")]
    expert_url: Option<String>,

    #[command(subcommand)]
    command: Command,
}

/// Where the tools come from. Without a manifest or remote the demo pack
/// is loaded.
#[derive(Args, Debug, Clone, Default)]
struct Tools {
    /// Manifest file or directory containing `manifest.json`.
    #[arg(long, env = "TOOLHUB_MANIFEST")]
    manifest: Option<PathBuf>,

    /// Load the demo pack as well.
    #[arg(long)]
    demo: bool,

    /// Import the tools of a running server (`host:port`, `http://...`,
    /// `stdio:command args`). Repeatable.
    #[arg(long = "remote", value_name = "ENDPOINT")]
    remotes: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Serve the registry over the wire protocol.
    Serve {
        #[arg(long, default_value = "stdio")]
        transport: Transport,
        #[arg(long, env = "TOOLHUB_BIND", default_value = DEFAULT_BIND)]
        bind: String,
        #[command(flatten)]
        tools: Tools,
    },
    /// Rank tools for a natural-language query.
    Find {
        query: String,
        #[arg(long, default_value = "auto")]
        strategy: Strategy,
        #[arg(long, default_value_t = 5)]
        limit: usize,
        /// Print the matches as JSON.
        #[arg(long)]
        json: bool,
        #[command(flatten)]
        tools: Tools,
    },
    /// Call a tool and print its result. Exits 0 only when the call succeeded.
    Call {
        name: Option<String>,
        /// Arguments as a JSON object.
        #[arg(long, default_value = "{}", conflicts_with = "stdin")]
        args: String,
        /// Read a `{"name", "arguments"}` call from standard input.
        #[arg(long)]
        stdin: bool,
        #[command(flatten)]
        tools: Tools,
    },
    /// List registered tools.
    List {
        #[arg(long)]
        tag: Option<String>,
        #[arg(long)]
        json: bool,
        #[command(flatten)]
        tools: Tools,
    },
    /// Load a manifest and print the names it registers.
    Register {
        #[command(flatten)]
        tools: Tools,
    },
    /// Import a running server's tools and print their names.
    RegisterRemote { endpoint: String },
    /// Check a composition plan against the registry and print its name.
    Compose {
        #[arg(long)]
        plan: PathBuf,
        #[command(flatten)]
        tools: Tools,
    },
    /// Refine a tool's descriptions against observed executions.
    Optimize {
        name: String,
        #[arg(long, default_value_t = toolhub::refinement::optimizer::DEFAULT_THRESHOLD)]
        threshold: f64,
        #[arg(long, default_value_t = toolhub::refinement::optimizer::DEFAULT_MAX_ROUNDS)]
        max_rounds: usize,
        /// Where to write the optimized spec; defaults to `NAME.optimized.json`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        tools: Tools,
    },
    /// Generate a new tool package from a description.
    Discover {
        description: String,
        #[arg(long, default_value_t = toolhub::refinement::discover::DEFAULT_TARGET)]
        target: f64,
        #[arg(long, default_value_t = toolhub::refinement::discover::DEFAULT_MAX_ROUNDS)]
        max_rounds: usize,
        /// Manifest directory the package is written into.
        #[arg(long, default_value = "generated")]
        out: PathBuf,
        #[command(flatten)]
        tools: Tools,
    },
    /// Run the human-expert feedback server.
    ExpertServe {
        #[arg(long, env = "TOOLHUB_EXPERT_BIND", default_value = DEFAULT_EXPERT_BIND)]
        bind: String,
        /// Append-only journal; state is replayed from it on start.
        #[arg(long)]
        journal: Option<PathBuf>,
    },
}

fn backend(spec: &str) -> Result<Arc<dyn AgentBackend>> {
    if spec == "mock" {
        return Ok(Arc::new(rubric_backend("mock")));
    }
    if spec.starts_with("http://") || spec.starts_with("https://") {
        return Ok(Arc::new(HttpBackend::new("http", spec)));
    }
    Err(Usage(format!("backend '{spec}' is neither 'mock' nor an http(s) URL")).into())
}

async fn build_hub(cli: &Cli, tools: &Tools) -> Result<Hub> {
    let mut builder = Hub::builder().backend(backend(&cli.backend)?);
    if let Some(url) = &cli.expert_url {
        builder = builder.expert(Arc::new(HttpExpert::new(url.trim_end_matches('/'))));
    }
    let hub = builder.build();
    // Manifests may bind any built-in handler by name.
    toolhub::demo::register_demo_handlers(hub.registry());
    if tools.demo || (tools.manifest.is_none() && tools.remotes.is_empty()) {
        toolhub::demo::install_demo_pack(&hub)?;
        toolhub::demo::install_case_study(&hub)?;
    }
    if let Some(path) = &tools.manifest {
        let report = hub.load_manifest(path)?;
        for e in &report.errors {
            tracing::warn!(file = %e.file, "skipped manifest entry: {}", e.error);
            eprintln!("warning: {}: {}", e.file, e.error);
        }
    }
    for endpoint in &tools.remotes {
        let import = hub.register_remote(endpoint).await?;
        for s in &import.skipped {
            eprintln!("warning: {endpoint}: skipped {}: {}", s.name.as_deref().unwrap_or("?"), s.error);
        }
    }
    Ok(hub)
}

fn print_json(value: &Value) {
    say!("{}", serde_json::to_string_pretty(value).expect("values serialize"));
}

fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Usage(format!("cannot read {}: {e}", path.display())).into())
}

async fn call(hub: &Hub, name: Option<String>, args: &str, stdin: bool) -> Result<u8> {
    let raw = match (name, stdin) {
        (None, true) => {
            let mut text = String::new();
            std::io::stdin().read_to_string(&mut text).context("reading the call from standard input")?;
            text
        }
        (Some(name), false) => format!(r#"{{"name":{},"arguments":{args}}}"#, json!(name)),
        (Some(_), true) => return Err(Usage("give either a tool name or --stdin, not both".into()).into()),
        (None, false) => return Err(Usage("missing tool name (or --stdin)".into()).into()),
    };
    let out = hub.run(&raw).await;
    say!("{out}");
    let result = ToolResult::from_value(&serde_json::from_str(&out)?)?;
    Ok(match &result.outcome {
        Ok(_) => exit::OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit::for_code(e.code)
        }
    })
}

async fn find(hub: &Hub, query: &str, strategy: Strategy, limit: usize, as_json: bool) -> Result<u8> {
    let matches = hub.find_tool(query, strategy, limit).await?;
    if as_json {
        print_json(&serde_json::to_value(&matches)?);
        return Ok(exit::OK);
    }
    let width = matches.iter().map(|m| m.tool_name.len()).max().unwrap_or(4).max(4);
    say!("{:>4}  {:<width$}  {:>10}  strategy", "rank", "tool", "score");
    for (i, m) in matches.iter().enumerate() {
        say!("{:>4}  {:<width$}  {:>10.4}  {}", i + 1, m.tool_name, m.score, m.strategy.as_str());
    }
    Ok(exit::OK)
}

fn list(hub: &Hub, tag: Option<String>, as_json: bool) -> u8 {
    let filter = ListFilter { tag, ..Default::default() };
    if as_json {
        print_json(&hub.list_tools_value(&filter));
    } else {
        for spec in hub.list_tools(&filter) {
            say!("{}\t{}", spec.name, spec.description);
        }
    }
    exit::OK
}

/// Runs until the server stops or the process is interrupted.
async fn wait_for_interrupt() {
    if tokio::signal::ctrl_c().await.is_err() {
        std::future::pending::<()>().await;
    }
}

async fn run(cli: Cli) -> Result<u8> {
    match &cli.command {
        Command::Serve { transport, bind, tools } => {
            let hub = build_hub(&cli, tools).await?;
            let server =
                serve(RpcService::new(hub), *transport, bind).await.with_context(|| format!("binding {bind}"))?;
            match server.endpoint() {
                Some(endpoint) => {
                    eprintln!("listening on {endpoint}");
                    wait_for_interrupt().await;
                    server.shutdown().await;
                }
                None => server.join().await?,
            }
            Ok(exit::OK)
        }
        Command::Find { query, strategy, limit, json, tools } => {
            let hub = build_hub(&cli, tools).await?;
            find(&hub, query, *strategy, *limit, *json).await
        }
        Command::Call { name, args, stdin, tools } => {
            let hub = build_hub(&cli, tools).await?;
            call(&hub, name.clone(), args, *stdin).await
        }
        Command::List { tag, json, tools } => Ok(list(&build_hub(&cli, tools).await?, tag.clone(), *json)),
        Command::Register { tools } => {
            let Some(path) = &tools.manifest else {
                return Err(Usage("register needs --manifest PATH (or TOOLHUB_MANIFEST)".into()).into());
            };
            let hub = Hub::new();
            toolhub::demo::register_demo_handlers(hub.registry());
            let report = hub.load_manifest(path)?;
            for name in &report.loaded {
                say!("{name}");
            }
            for e in &report.errors {
                eprintln!("error: {}: {}", e.file, e.error);
            }
            Ok(report.errors.first().map_or(exit::OK, |e| exit::for_code(e.error.code)))
        }
        Command::RegisterRemote { endpoint } => {
            let hub = Hub::new();
            let import = hub.register_remote(endpoint).await?;
            for name in &import.registered {
                say!("{name}");
            }
            for s in &import.skipped {
                eprintln!("warning: skipped {}: {}", s.name.as_deref().unwrap_or("?"), s.error);
            }
            Ok(exit::OK)
        }
        Command::Compose { plan, tools } => {
            let hub = build_hub(&cli, tools).await?;
            let plan = CompositePlan::from_json(&read_file(plan)?)?;
            say!("{}", hub.compose(plan)?);
            Ok(exit::OK)
        }
        Command::Optimize { name, threshold, max_rounds, out, tools } => {
            let hub = build_hub(&cli, tools).await?;
            let config = OptimizeConfig { threshold: *threshold, max_rounds: *max_rounds, ..Default::default() };
            let outcome = optimize_tool(&hub, name, &config).await?;
            let path = out.clone().unwrap_or_else(|| PathBuf::from(format!("{name}.optimized.json")));
            std::fs::write(&path, outcome.optimized.to_json_pretty() + "\n")
                .with_context(|| format!("writing {}", path.display()))?;
            print_json(&json!({
                "tool": name,
                "rounds_used": outcome.rounds_used,
                "terminated_by": outcome.terminated_by,
                "best_round": outcome.best_round,
                "overall": outcome.best_report().overall,
                "scores": outcome.best_report().scores,
                "low_confidence": outcome.low_confidence,
                "optimized_spec": path,
            }));
            Ok(exit::OK)
        }
        Command::Discover { description, target, max_rounds, out, tools } => {
            let hub = build_hub(&cli, tools).await?;
            let config = DiscoverConfig { target: *target, max_rounds: *max_rounds, ..Default::default() };
            let package = discover_tool(&hub, description, &config).await?;
            std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
            let root = package.write(out)?;
            print_json(&json!({
                "tool": package.spec.name,
                "accepted": package.accepted(),
                "overall": package.quality.overall,
                "scores": package.quality.scores,
                "package": root,
            }));
            Ok(exit::OK)
        }
        Command::ExpertServe { bind, journal } => {
            let queue = match journal {
                Some(path) => ExpertQueue::open(path, system_wall_clock(), QueueConfig::default())
                    .with_context(|| format!("opening journal {}", path.display()))?,
                None => ExpertQueue::new(),
            };
            let server = toolhub::expert::serve_expert(Arc::new(queue), bind)
                .await
                .with_context(|| format!("binding {bind}"))?;
            eprintln!("listening on {}", server.url());
            wait_for_interrupt().await;
            server.shutdown().await;
            Ok(exit::OK)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .init();
    let runtime = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: cannot start the runtime: {e}");
            return ExitCode::from(exit::IO);
        }
    };
    let code = match runtime.block_on(run(cli)) {
        Ok(code) => code,
        Err(e) => {
            if e.downcast_ref::<Silent>().is_none() {
                eprintln!("error: {e:#}");
            }
            exit::for_error(&e)
        }
    };
    // Lingering stdin readers would otherwise keep the process alive.
    runtime.shutdown_background();
    ExitCode::from(code)
}
