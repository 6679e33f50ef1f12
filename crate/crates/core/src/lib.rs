//! Runtime for agent tool ecosystems: a uniform tool protocol, a registry,
//! discovery, execution with caching, composition, agent-backed tools,
//! self-refinement, human expert consultation and remote serving.

pub mod agentic;
pub mod caller;
pub mod composer;
pub mod demo;
pub mod error;
pub mod expert;
pub mod finder;
pub mod handler;
pub mod hub;
pub mod protocol;
pub mod refinement;
pub mod registry;
pub mod scalar;
pub mod wire;

pub use agentic::{AgentBackend, AgentConfig, Backends, HttpBackend, MockBackend, OutputContract};
pub use caller::{CacheConfig, CallContext, Caller, CallerConfig, Clock, ManualClock, SystemClock};
pub use composer::{CompositePlan, Step};
pub use error::{ErrorCode, ToolError};
pub use finder::{Finder, Strategy, ToolMatch};
pub use handler::{handler_fn, shared, HandlerFactory, ToolHandler};
pub use hub::{Hub, HubBuilder, Services};
pub use protocol::{Arguments, ParamType, ParameterSpec, Status, ToolCall, ToolResult, ToolSpec, TypeDescriptor};
pub use registry::{ListFilter, Origin, Registry};
pub use scalar::Scalar;

/// Keyword match scored in double precision.
pub type KeywordMatch = finder::ToolMatch<f64>;
/// Keyword match scored in single precision.
pub type KeywordMatch32 = finder::ToolMatch<f32>;
pub type VectorStore64 = finder::embedding::VectorStore<f64>;
pub type VectorStore32 = finder::embedding::VectorStore<f32>;
pub type Vector64 = finder::embedding::Vector<f64>;
pub type Vector32 = finder::embedding::Vector<f32>;
