//! Exit-code-carrying errors: 2 for config parse problems, 3 for missing
//! inputs, 4 for invariant violations, 1 otherwise.

use std::fmt;

#[derive(Debug)]
pub struct CodedError {
    pub code: i32,
    pub kind: &'static str,
    pub message: String,
}

impl CodedError {
    pub fn config(message: impl Into<String>) -> Self {
        Self { code: 2, kind: "config_parse_error", message: message.into() }
    }
    pub fn missing(message: impl Into<String>) -> Self {
        Self { code: 3, kind: "missing_input", message: message.into() }
    }
    pub fn invariant(message: impl Into<String>) -> Self {
        Self { code: 4, kind: "invariant_violation", message: message.into() }
    }
}

impl fmt::Display for CodedError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind, self.message)
    }
}

impl std::error::Error for CodedError {}

pub fn missing_input(what: &str) -> anyhow::Error {
    CodedError::missing(format!("{what} not found")).into()
}

/// Wraps a core error as an invariant violation (exit 4), keeping IO errors
/// as missing inputs (exit 3).
pub fn invariant(err: swaplab_core::Error) -> anyhow::Error {
    match &err {
        swaplab_core::Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => {
            CodedError::missing(err.to_string()).into()
        }
        _ => CodedError::invariant(err.to_string()).into(),
    }
}

/// Exit code for an error chain: coded errors speak for themselves,
/// everything else is a generic failure.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    err.downcast_ref::<CodedError>().map_or(1, |e| e.code)
}

/// Machine-readable error report for stderr.
pub fn error_report(err: &anyhow::Error) -> String {
    let (kind, code) = err
        .downcast_ref::<CodedError>()
        .map_or(("error", 1), |e| (e.kind, e.code));
    serde_json::json!({
        "error": err.to_string(),
        "kind": kind,
        "exit_code": code,
    })
    .to_string()
}
