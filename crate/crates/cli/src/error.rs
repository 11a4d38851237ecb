use std::path::PathBuf;

use sac_core::SacError;
use serde_json::{json, Value};
use thiserror::Error;

use crate::config::Source;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("cannot read config file {}: {message}", path.display())]
    MissingFile { path: PathBuf, message: String },

    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("unknown key `{key}` ({origin})")]
    UnknownKey { key: String, origin: Source },

    #[error("invalid {key} = {value:?} ({origin}): {message}")]
    Invalid {
        key: String,
        value: String,
        origin: Source,
        message: String,
    },

    #[error("cannot write {}: {message}", path.display())]
    Output { path: PathBuf, message: String },

    /// The identity suite ran but at least one check failed.
    #[error("identity suite failed: {}", failed.join(", "))]
    ChecksFailed { failed: Vec<String> },

    #[error(transparent)]
    Core(#[from] SacError),
}

impl CliError {
    fn category(&self) -> &'static str {
        match self {
            CliError::MissingFile { .. } => "missing_file",
            CliError::Parse { .. } => "parse",
            CliError::UnknownKey { .. } => "unknown_key",
            CliError::Invalid { .. } => "invalid_value",
            CliError::Output { .. } => "output",
            CliError::ChecksFailed { .. } => "checks_failed",
            CliError::Core(SacError::Config(_)) => "invalid_value",
            CliError::Core(_) => "solver",
        }
    }

    /// Machine-readable description written on contract failures.
    pub fn to_json(&self) -> Value {
        let mut v = json!({
            "status": "failure",
            "error": self.category(),
            "message": self.to_string(),
        });
        let (key, origin, line) = match self {
            CliError::UnknownKey { key, origin } | CliError::Invalid { key, origin, .. } => {
                (Some(key.clone()), Some(origin.to_string()), origin.line())
            }
            CliError::Parse { line, .. } => (None, None, Some(*line)),
            _ => (None, None, None),
        };
        if let Some(key) = key {
            v["key"] = json!(key);
        }
        if let Some(origin) = origin {
            v["origin"] = json!(origin);
        }
        if let Some(line) = line {
            v["line"] = json!(line);
        }
        if let CliError::ChecksFailed { failed } = self {
            v["failed_checks"] = json!(failed);
        }
        v
    }
}
