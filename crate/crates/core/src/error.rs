use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A document did not match its schema; `field` names the offending key.
    #[error("invalid `{field}`: {message}")]
    Schema { field: String, message: String },

    #[error("pin {pin} is claimed by both `{first}` and `{second}`")]
    PinConflict {
        pin: String,
        first: String,
        second: String,
    },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("library index entry `{entry}`: {message}")]
    IndexEntry { entry: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to parse {what}: {message}")]
    Parse { what: String, message: String },

    /// Transport-level failure talking to the model endpoint. Retryable.
    #[error("model transport error: {0}")]
    Transport(String),

    /// The endpoint rejected the request; retrying will not help.
    #[error("model endpoint error: {0}")]
    Endpoint(String),

    #[error("replay miss: no recorded response for request digest {digest}")]
    ReplayMiss { digest: String },

    #[error("corrupt transcript at line {line}: {message}")]
    Transcript { line: usize, message: String },

    #[error("knowledge store schema_version {found} cannot be read by this build (supports {supported}); re-run `learn` to migrate")]
    KnowledgeVersion { found: u32, supported: u32 },

    #[error("unknown placeholders in text: {}", .0.join(", "))]
    UnknownPlaceholder(Vec<String>),

    #[error("prompt needs {needed} tokens but the budget is {budget}; reduce k or the context budget")]
    PromptBudget { needed: usize, budget: usize },

    /// Toolchain or board problems. These are not code defects and never
    /// reach the repair loops.
    #[error("environment error: {0}")]
    Environment(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("missing {artifact}; run `{hint}` first")]
    MissingArtifact { artifact: String, hint: String },
}

impl Error {
    pub fn schema(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Schema {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(what: impl Into<String>, message: impl ToString) -> Self {
        Error::Parse {
            what: what.into(),
            message: message.to_string(),
        }
    }
}

/// Writes `contents` to a sibling temp file and renames it over `path`, so
/// a failed write never leaves a truncated artifact behind.
pub fn write_atomic(path: &std::path::Path, contents: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "artifact".to_string());
    let tmp = path.with_file_name(format!(".{file_name}.tmp{}", std::process::id()));
    std::fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
