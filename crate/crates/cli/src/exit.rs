//! Process exit codes.
//!
//! | code | meaning                                   |
//! |------|-------------------------------------------|
//! | 0    | success                                   |
//! | 1    | I/O failure outside any tool (bind, disk) |
//! | 2    | usage error                               |
//! | 3    | invalid spec, call or arguments           |
//! | 4    | tool not found                            |
//! | 5    | tool execution failed                     |
//! | 6    | remote server or expert unavailable       |
//! | 7    | timeout                                   |

use std::fmt;

use toolhub::{ErrorCode, ToolError};

pub const OK: u8 = 0;
pub const IO: u8 = 1;
pub const USAGE: u8 = 2;
pub const SPEC: u8 = 3;
pub const NOT_FOUND: u8 = 4;
pub const EXECUTION: u8 = 5;
pub const REMOTE: u8 = 6;
pub const TIMEOUT: u8 = 7;

pub fn for_code(code: ErrorCode) -> u8 {
    match code {
        ErrorCode::SpecInvalid | ErrorCode::MissingRequired | ErrorCode::UnknownArgument | ErrorCode::TypeMismatch => {
            SPEC
        }
        ErrorCode::ToolNotFound => NOT_FOUND,
        ErrorCode::ExecutionFailed => EXECUTION,
        ErrorCode::RemoteUnavailable | ErrorCode::ExpertUnavailable => REMOTE,
        ErrorCode::Timeout => TIMEOUT,
    }
}

/// A command-line mistake that clap cannot catch, such as conflicting
/// inputs or an unreadable file.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

/// Reports an already-printed failure with a specific code.
#[derive(Debug)]
pub struct Silent(pub u8);

impl fmt::Display for Silent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "exit {}", self.0)
    }
}

impl std::error::Error for Silent {}

pub fn for_error(err: &anyhow::Error) -> u8 {
    if let Some(s) = err.downcast_ref::<Silent>() {
        return s.0;
    }
    if err.downcast_ref::<Usage>().is_some() {
        return USAGE;
    }
    if let Some(e) = err.downcast_ref::<ToolError>() {
        return for_code(e.code);
    }
    IO
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes_are_distinct_per_class() {
        let codes = [
            (ErrorCode::ToolNotFound, 4),
            (ErrorCode::SpecInvalid, 3),
            (ErrorCode::MissingRequired, 3),
            (ErrorCode::UnknownArgument, 3),
            (ErrorCode::TypeMismatch, 3),
            (ErrorCode::ExecutionFailed, 5),
            (ErrorCode::Timeout, 7),
            (ErrorCode::RemoteUnavailable, 6),
            (ErrorCode::ExpertUnavailable, 6),
        ];
        for (code, want) in codes {
            assert_eq!(for_code(code), want, "{code:?}");
        }
    }

    #[test]
    fn anyhow_errors_keep_their_class() {
        assert_eq!(for_error(&anyhow::Error::new(ToolError::not_found("x"))), NOT_FOUND);
        assert_eq!(for_error(&anyhow::Error::new(Usage("x".into()))), USAGE);
        assert_eq!(for_error(&anyhow::Error::new(Silent(TIMEOUT))), TIMEOUT);
        assert_eq!(for_error(&anyhow::anyhow!("disk full")), IO);
    }
}
