use std::path::PathBuf;

use modaltune_core::Error as CoreError;

/// Failure of one command, mapped to a process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("schema mismatch: {0}")]
    Schema(String),

    #[error("digest mismatch for {what}: expected {expected}, found {found}")]
    Digest {
        what: String,
        expected: String,
        found: String,
    },

    #[error(transparent)]
    Core(#[from] CoreError),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Schema(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Core(CoreError::Csv(e))
    }
}

fn is_not_found(e: &std::io::Error) -> bool {
    e.kind() == std::io::ErrorKind::NotFound
}

impl CliError {
    /// Exit code and short kind label, as documented in the README.
    pub fn code(&self) -> (i32, &'static str) {
        match self {
            CliError::MissingFile(_) => (3, "missing_file"),
            CliError::Schema(_) => (4, "schema_mismatch"),
            CliError::Digest { .. } => (5, "digest_mismatch"),
            CliError::Core(e) => match e {
                CoreError::Io { source, .. } if is_not_found(source) => (3, "missing_file"),
                CoreError::Csv(c) => match c.kind() {
                    csv::ErrorKind::Io(io) if is_not_found(io) => (3, "missing_file"),
                    _ => (4, "schema_mismatch"),
                },
                CoreError::Format { .. } | CoreError::Json(_) | CoreError::Dimension { .. } => (4, "schema_mismatch"),
                CoreError::Digest { .. } => (5, "digest_mismatch"),
                CoreError::Degenerate(_) => (6, "degenerate"),
                CoreError::Numeric { .. } | CoreError::Convergence { .. } => (7, "numeric"),
                CoreError::Io { .. } => (8, "io"),
                CoreError::Argument(_) => (9, "invalid_argument"),
            },
        }
    }

    /// `error code=<n> kind=<kind> msg="<text>"` on a single line.
    pub fn line(&self) -> String {
        let (code, kind) = self.code();
        let msg = self.to_string().replace(['\n', '\r'], " ").replace('"', "'");
        format!("error code={code} kind={kind} msg=\"{msg}\"")
    }
}

/// Fails with [`CliError::MissingFile`] unless `path` exists.
pub fn require(path: &std::path::Path) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::MissingFile(path.to_path_buf()))
    }
}
