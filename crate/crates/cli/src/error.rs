use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{}", .0.join("; "))]
    Config(Vec<String>),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Io(String),
    /// A rerun produced different bytes than its manifest records.
    #[error("{0}")]
    Mismatch(String),
    /// A numerical check failed its tolerance.
    #[error("{0}")]
    Check(String),
    #[error(transparent)]
    Core(#[from] mirror_po::Error),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Usage(_) => "usage",
            CliError::Io(_) => "io",
            CliError::Mismatch(_) => "mismatch",
            CliError::Check(_) => "check",
            CliError::Core(e) => e.kind(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 2,
            CliError::Core(mirror_po::Error::Config(_)) => 2,
            _ => 1,
        }
    }

    /// `error kind=<kind> message=<text>` on a single line.
    pub fn one_line(&self) -> String {
        let msg = self.to_string().replace(['\n', '\r'], " ");
        format!("error kind={} message={}", self.kind(), msg.trim())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
