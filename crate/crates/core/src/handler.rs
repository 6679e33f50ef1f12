//! Executable handler contracts.

use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use serde_json::Value;

use crate::caller::CallContext;
use crate::error::ToolError;
use crate::protocol::{Arguments, ToolSpec};

/// A live tool instance: processes validated arguments into a payload.
#[async_trait]
pub trait ToolHandler: Send + Sync {
    async fn run(&self, args: Arguments, ctx: &CallContext) -> Result<Value, ToolError>;

    /// Non-reentrant handlers are serialized per tool by the caller.
    fn reentrant(&self) -> bool {
        true
    }

    /// Overrides the caller's default deadline for this invocation.
    fn timeout_hint(&self, _args: &Arguments) -> Option<Duration> {
        None
    }
}

/// Produces a handler on first use. The spec's settings are the
/// configuration injected at load time (endpoints, keys, ...).
#[async_trait]
pub trait HandlerFactory: Send + Sync {
    async fn load(&self, spec: &ToolSpec, ctx: &CallContext) -> Result<Arc<dyn ToolHandler>, ToolError>;
}

/// Handler built from a synchronous closure over the validated arguments.
pub struct FnHandler<F> {
    func: F,
    reentrant: bool,
}

impl<F> FnHandler<F>
where
    F: Fn(&Arguments) -> Result<Value, ToolError> + Send + Sync + 'static,
{
    pub fn new(func: F) -> Self {
        Self { func, reentrant: true }
    }

    pub fn non_reentrant(mut self) -> Self {
        self.reentrant = false;
        self
    }
}

#[async_trait]
impl<F> ToolHandler for FnHandler<F>
where
    F: Fn(&Arguments) -> Result<Value, ToolError> + Send + Sync + 'static,
{
    async fn run(&self, args: Arguments, _ctx: &CallContext) -> Result<Value, ToolError> {
        (self.func)(&args)
    }

    fn reentrant(&self) -> bool {
        self.reentrant
    }
}

/// Factory that hands out the same, already-constructed handler.
pub struct Shared(pub Arc<dyn ToolHandler>);

#[async_trait]
impl HandlerFactory for Shared {
    async fn load(&self, _spec: &ToolSpec, _ctx: &CallContext) -> Result<Arc<dyn ToolHandler>, ToolError> {
        Ok(self.0.clone())
    }
}

/// Wraps a plain closure into a factory.
pub fn handler_fn<F>(func: F) -> Arc<dyn HandlerFactory>
where
    F: Fn(&Arguments) -> Result<Value, ToolError> + Send + Sync + 'static,
{
    Arc::new(Shared(Arc::new(FnHandler::new(func))))
}

/// Factory wrapper around an existing handler instance.
pub fn shared(handler: impl ToolHandler + 'static) -> Arc<dyn HandlerFactory> {
    Arc::new(Shared(Arc::new(handler)))
}
