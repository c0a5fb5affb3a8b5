use std::fmt;

use serde_json::json;
use sketchformer::Error;
use sketchformer_service::ServeError;

/// Process exit statuses. `--help` and `--version` exit with 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    Usage = 2,
    MissingFile = 3,
    Config = 4,
    Input = 5,
    Format = 6,
    Io = 7,
    Training = 8,
    Serve = 9,
}

impl ExitKind {
    pub fn code(self) -> i32 {
        self as i32
    }

    pub fn name(self) -> &'static str {
        match self {
            ExitKind::Usage => "usage",
            ExitKind::MissingFile => "missing_file",
            ExitKind::Config => "config",
            ExitKind::Input => "input",
            ExitKind::Format => "format",
            ExitKind::Io => "io",
            ExitKind::Training => "training",
            ExitKind::Serve => "serve",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ExitKind,
    pub message: String,
    /// Stdout was closed by the reader, e.g. `| head`; not a failure.
    pub(crate) broken_pipe: bool,
}

impl CliError {
    pub fn new(kind: ExitKind, message: impl Into<String>) -> Self {
        CliError {
            kind,
            message: message.into(),
            broken_pipe: false,
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new(ExitKind::Usage, message)
    }

    pub fn input(message: impl Into<String>) -> Self {
        Self::new(ExitKind::Input, message)
    }

    /// The single stderr line reported on failure.
    pub fn to_json_line(&self) -> String {
        json!({
            "error": self.kind.name(),
            "code": self.kind.code(),
            "message": self.message.replace('\n', " "),
        })
        .to_string()
    }

    /// Prefixes the message, e.g. with the file and line it concerns.
    pub fn context(mut self, prefix: impl fmt::Display) -> Self {
        self.message = format!("{prefix}: {}", self.message);
        self
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let kind = match &e {
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => ExitKind::MissingFile,
            Error::Io { .. } => ExitKind::Io,
            Error::Config(_) => ExitKind::Config,
            Error::Usage(_) => ExitKind::Usage,
            Error::Format(_) => ExitKind::Format,
            Error::NonFiniteLoss { .. } => ExitKind::Training,
            Error::Parse(_)
            | Error::MalformedStroke { .. }
            | Error::InvalidSketch(_)
            | Error::Truncation { .. }
            | Error::Decode(_)
            | Error::TooFewDistinctPoints { .. }
            | Error::Shape(_)
            | Error::InsufficientData(_)
            | Error::InvalidLabel { .. } => ExitKind::Input,
        };
        CliError::new(kind, e.to_string())
    }
}

impl From<ServeError> for CliError {
    fn from(e: ServeError) -> Self {
        match e {
            ServeError::Load(inner) => inner.into(),
            other => CliError::new(ExitKind::Serve, other.to_string()),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// File-system errors outside the core library.
pub fn io_error(path: &std::path::Path, e: std::io::Error) -> CliError {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
    .into()
}
