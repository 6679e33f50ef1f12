//! The tool manager: every known tool, its origin and how to obtain a
//! handler for it.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::SystemTime;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::agentic::AgentConfig;
use crate::composer::CompositePlan;
use crate::error::ToolError;
use crate::handler::HandlerFactory;
use crate::protocol::{parse_tool_spec, ToolSpec};

/// Where a tool came from.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Origin {
    Local,
    Remote(String),
    Composed,
    Generated,
}

impl Origin {
    pub fn kind(&self) -> OriginKind {
        match self {
            Origin::Local => OriginKind::Local,
            Origin::Remote(_) => OriginKind::Remote,
            Origin::Composed => OriginKind::Composed,
            Origin::Generated => OriginKind::Generated,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OriginKind {
    Local,
    Remote,
    Composed,
    Generated,
}

impl std::str::FromStr for OriginKind {
    type Err = ToolError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "local" => Ok(OriginKind::Local),
            "remote" => Ok(OriginKind::Remote),
            "composed" => Ok(OriginKind::Composed),
            "generated" => Ok(OriginKind::Generated),
            other => Err(ToolError::spec(format!("unknown origin '{other}'"))),
        }
    }
}

/// How the caller obtains an executable handler for an entry.
#[derive(Clone)]
pub enum HandlerRef {
    /// A factory supplied at registration time (closures, remote proxies).
    Factory(Arc<dyn HandlerFactory>),
    /// Identifier looked up in the registry's handler catalog at call time.
    Named(String),
    /// Declarative composition program.
    Plan(CompositePlan),
    /// Prompt template executed by an agent backend.
    Agent(AgentConfig),
}

impl fmt::Debug for HandlerRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HandlerRef::Factory(_) => f.write_str("Factory(..)"),
            HandlerRef::Named(id) => write!(f, "Named({id})"),
            HandlerRef::Plan(_) => f.write_str("Plan(..)"),
            HandlerRef::Agent(cfg) => write!(f, "Agent(backend={})", cfg.backend),
        }
    }
}

impl From<Arc<dyn HandlerFactory>> for HandlerRef {
    fn from(factory: Arc<dyn HandlerFactory>) -> Self {
        HandlerRef::Factory(factory)
    }
}

#[derive(Debug, Clone)]
pub struct ToolEntry {
    pub spec: ToolSpec,
    pub origin: Origin,
    pub handler: HandlerRef,
    pub registered_at: SystemTime,
}

/// Filter for [`Registry::list_tools`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ListFilter {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<OriginKind>,
}

impl ListFilter {
    pub fn tag(tag: impl Into<String>) -> Self {
        Self { tag: Some(tag.into()), origin: None }
    }

    pub fn origin(origin: OriginKind) -> Self {
        Self { tag: None, origin: Some(origin) }
    }

    fn matches(&self, entry: &ToolEntry) -> bool {
        self.tag.as_ref().is_none_or(|t| entry.spec.tags.iter().any(|x| x == t))
            && self.origin.is_none_or(|o| entry.origin.kind() == o)
    }
}

/// Holds every known tool. Reads are concurrent; writers are serialized and
/// never expose a partially registered entry.
#[derive(Default)]
pub struct Registry {
    entries: RwLock<BTreeMap<String, Arc<ToolEntry>>>,
    catalog: RwLock<HashMap<String, Arc<dyn HandlerFactory>>>,
    writer: Mutex<()>,
    version: AtomicU64,
}

impl fmt::Debug for Registry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Registry").field("tools", &self.len()).field("version", &self.version()).finish()
    }
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Monotone counter bumped by every mutation.
    pub fn version(&self) -> u64 {
        self.version.load(Ordering::Acquire)
    }

    pub fn len(&self) -> usize {
        self.entries.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.read().is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.read().contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<Arc<ToolEntry>> {
        self.entries.read().get(name).cloned()
    }

    pub fn spec(&self, name: &str) -> Option<ToolSpec> {
        self.get(name).map(|e| e.spec.clone())
    }

    /// All entries, sorted by name.
    pub fn entries(&self) -> Vec<Arc<ToolEntry>> {
        self.entries.read().values().cloned().collect()
    }

    /// Makes a handler available to `HandlerRef::Named` entries.
    pub fn register_handler(&self, id: impl Into<String>, factory: Arc<dyn HandlerFactory>) {
        self.catalog.write().insert(id.into(), factory);
    }

    pub fn resolve_handler(&self, id: &str) -> Option<Arc<dyn HandlerFactory>> {
        self.catalog.read().get(id).cloned()
    }

    /// Registers a fully described entry.
    pub fn register(&self, spec: ToolSpec, origin: Origin, handler: HandlerRef) -> Result<String, ToolError> {
        spec.validate()?;
        if let Origin::Remote(endpoint) = &origin {
            if endpoint.trim().is_empty() {
                return Err(ToolError::spec_at("origin", "remote entries need an endpoint address"));
            }
        }
        let _w = self.writer.lock();
        let mut entries = self.entries.write();
        if entries.contains_key(&spec.name) {
            return Err(ToolError::spec_at("name", format!("a tool named '{}' is already registered", spec.name))
                .with_detail(json!({ "path": "name", "conflict": spec.name })));
        }
        let name = spec.name.clone();
        entries.insert(name.clone(), Arc::new(ToolEntry { spec, origin, handler, registered_at: SystemTime::now() }));
        self.version.fetch_add(1, Ordering::AcqRel);
        Ok(name)
    }

    /// Registers a local tool with its handler; it is findable and callable
    /// immediately.
    pub fn register_local(&self, spec: ToolSpec, handler: impl Into<HandlerRef>) -> Result<String, ToolError> {
        self.register(spec, Origin::Local, handler.into())
    }

    pub fn remove(&self, name: &str) -> Option<Arc<ToolEntry>> {
        let _w = self.writer.lock();
        let removed = self.entries.write().remove(name);
        if removed.is_some() {
            self.version.fetch_add(1, Ordering::AcqRel);
        }
        removed
    }

    /// Removes every entry imported from `endpoint`; returns their names.
    pub fn remove_remote(&self, endpoint: &str) -> Vec<String> {
        let _w = self.writer.lock();
        let mut entries = self.entries.write();
        let names: Vec<String> = entries
            .values()
            .filter(|e| matches!(&e.origin, Origin::Remote(ep) if ep == endpoint))
            .map(|e| e.spec.name.clone())
            .collect();
        for n in &names {
            entries.remove(n);
        }
        if !names.is_empty() {
            self.version.fetch_add(1, Ordering::AcqRel);
        }
        names
    }

    /// Specs in lexicographic name order.
    pub fn list_tools(&self, filter: &ListFilter) -> Vec<ToolSpec> {
        self.entries.read().values().filter(|e| filter.matches(e)).map(|e| e.spec.clone()).collect()
    }

    /// Loads a manifest directory (or a `manifest.json` path) into this
    /// registry. Malformed entries are skipped and reported.
    pub fn load_manifest(&self, path: impl AsRef<Path>) -> Result<ManifestReport, ToolError> {
        let (dir, manifest_path) = manifest_paths(path.as_ref());
        let text = std::fs::read_to_string(&manifest_path)
            .map_err(|e| ToolError::spec(format!("cannot read manifest {}: {e}", manifest_path.display())))?;
        self.load_manifest_from(&text, |rel| std::fs::read_to_string(dir.join(rel)).map_err(|e| e.to_string()))
            .map_err(|e| ToolError::spec(format!("{}: {}", manifest_path.display(), e.message)))
    }

    /// Loads a manifest whose referenced files are supplied by `read`
    /// (relative name to contents).
    pub fn load_manifest_from(
        &self,
        manifest_text: &str,
        read: impl Fn(&str) -> Result<String, String>,
    ) -> Result<ManifestReport, ToolError> {
        let manifest: Manifest =
            serde_json::from_str(manifest_text).map_err(|e| ToolError::spec(format!("malformed manifest: {e}")))?;
        let mut report = ManifestReport::default();
        for item in manifest.tools {
            match self.load_manifest_item(&read, &item) {
                Ok(name) => report.loaded.push(name),
                Err(error) => report.errors.push(ManifestError { file: item.file.clone(), error }),
            }
        }
        Ok(report)
    }

    fn load_manifest_item(
        &self,
        read: &impl Fn(&str) -> Result<String, String>,
        item: &ManifestItem,
    ) -> Result<String, ToolError> {
        let text = read(&item.file).map_err(|e| ToolError::spec(format!("cannot read {}: {e}", item.file)))?;
        let mut spec = parse_tool_spec(&text)?;
        for (k, v) in &item.settings {
            spec.settings.insert(k.clone(), v.clone());
        }
        let read_json = |rel: &str| -> Result<Value, ToolError> {
            let body = read(rel).map_err(|e| ToolError::spec(format!("cannot read {rel}: {e}")))?;
            serde_json::from_str(&body).map_err(|e| ToolError::spec(format!("{rel}: not valid JSON: {e}")))
        };
        let (handler, default_origin) = if let Some(rel) = &item.program {
            let plan = CompositePlan::body_from_value(&read_json(rel)?, &spec)?;
            (HandlerRef::Plan(plan), Origin::Generated)
        } else if let Some(rel) = &item.plan {
            let plan = CompositePlan::body_from_value(&read_json(rel)?, &spec)?;
            (HandlerRef::Plan(plan), Origin::Composed)
        } else if let Some(rel) = &item.agent {
            let cfg: AgentConfig = serde_json::from_value(read_json(rel)?)
                .map_err(|e| ToolError::spec(format!("{rel}: invalid agent config: {e}")))?;
            cfg.check_placeholders()?;
            (HandlerRef::Agent(cfg), Origin::Local)
        } else {
            (HandlerRef::Named(item.handler.clone().unwrap_or_else(|| spec.name.clone())), Origin::Local)
        };
        let origin = match item.origin {
            None => default_origin,
            Some(OriginKind::Local) => Origin::Local,
            Some(OriginKind::Composed) => Origin::Composed,
            Some(OriginKind::Generated) => Origin::Generated,
            Some(OriginKind::Remote) => return Err(ToolError::spec("remote entries cannot be loaded from a manifest")),
        };
        self.register(spec, origin, handler)
    }

    /// Writes every persistable entry as one spec file per tool plus
    /// `manifest.json`. Factory-backed and remote entries are skipped.
    pub fn save_manifest(&self, dir: impl AsRef<Path>) -> Result<ManifestReport, ToolError> {
        let dir = dir.as_ref();
        let io = |e: std::io::Error| ToolError::execution(format!("cannot write manifest: {e}"));
        std::fs::create_dir_all(dir).map_err(io)?;
        let mut manifest = Manifest::default();
        let mut report = ManifestReport::default();
        for entry in self.entries() {
            let name = entry.spec.name.clone();
            let file = format!("{name}.json");
            let mut item = ManifestItem { file: file.clone(), ..Default::default() };
            match (&entry.handler, &entry.origin) {
                (_, Origin::Remote(_)) | (HandlerRef::Factory(_), _) => {
                    report.errors.push(ManifestError {
                        file,
                        error: ToolError::spec(format!("'{name}' has no persistable handler; skipped")),
                    });
                    continue;
                }
                (HandlerRef::Named(id), _) => {
                    if *id != name {
                        item.handler = Some(id.clone());
                    }
                }
                (HandlerRef::Plan(plan), origin) => {
                    let rel = format!("{name}.plan.json");
                    write_json(&dir.join(&rel), &plan.body_to_value())?;
                    if *origin == Origin::Generated {
                        item.program = Some(rel);
                    } else {
                        item.plan = Some(rel);
                    }
                }
                (HandlerRef::Agent(cfg), _) => {
                    let rel = format!("{name}.agent.json");
                    write_json(&dir.join(&rel), &serde_json::to_value(cfg).expect("agent config serializes"))?;
                    item.agent = Some(rel);
                }
            }
            item.origin = match entry.origin {
                Origin::Local => None,
                ref other => Some(other.kind()),
            };
            write_json(&dir.join(&file), &entry.spec.to_value())?;
            manifest.tools.push(item);
            report.loaded.push(name);
        }
        write_json(&dir.join(MANIFEST_FILE), &serde_json::to_value(&manifest).expect("manifest serializes"))?;
        Ok(report)
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn manifest_paths(path: &Path) -> (PathBuf, PathBuf) {
    if path.is_dir() {
        (path.to_path_buf(), path.join(MANIFEST_FILE))
    } else {
        (path.parent().map(Path::to_path_buf).unwrap_or_default(), path.to_path_buf())
    }
}

pub fn write_json(path: &Path, value: &Value) -> Result<(), ToolError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|e| ToolError::execution(format!("cannot create {}: {e}", parent.display())))?;
    }
    let mut text = serde_json::to_string_pretty(value).expect("json serializes");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| ToolError::execution(format!("cannot write {}: {e}", path.display())))
}

/// `manifest.json` layout.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default)]
    pub tools: Vec<ManifestItem>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestItem {
    /// Spec document, relative to the manifest directory.
    pub file: String,
    /// Handler catalog identifier; defaults to the tool name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub handler: Option<String>,
    /// Declarative handler program of a generated tool.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub program: Option<String>,
    /// Composition plan body of a composed tool.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<String>,
    /// Agent configuration of an agentic tool.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agent: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<OriginKind>,
    #[serde(default, skip_serializing_if = "Map::is_empty")]
    pub settings: Map<String, Value>,
}

#[derive(Debug, Clone)]
pub struct ManifestError {
    pub file: String,
    pub error: ToolError,
}

#[derive(Debug, Clone, Default)]
pub struct ManifestReport {
    pub loaded: Vec<String>,
    pub errors: Vec<ManifestError>,
}

/// Builds a fresh registry from a manifest.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<(Registry, ManifestReport), ToolError> {
    let registry = Registry::new();
    let report = registry.load_manifest(path)?;
    Ok((registry, report))
}
