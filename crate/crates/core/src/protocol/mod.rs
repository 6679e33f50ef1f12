//! Tool specification schema and interaction schema.

mod call;
mod schema;
mod spec;

pub use call::{call_from_value, parse_tool_call, validate_arguments, Arguments, Status, ToolCall, ToolResult};
pub use schema::{conforms_to_return_schema, json_kind, Conformance, Field, TypeDescriptor};
pub use spec::{
    parse_tool_spec, spec_from_value, validate_tool_name, ParamType, ParameterSpec, ToolSpec, MAX_NAME_LEN,
};
