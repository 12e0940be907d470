use std::fmt;

/// Harness failure, split by exit code: usage and configuration problems
/// exit with 2, computational failures with 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CliError {
    Usage(String),
    Compute(String),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        Self::Usage(msg.into())
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Usage(_) => 2,
            Self::Compute(_) => 1,
        }
    }

    /// Prefixes the message, keeping the kind.
    pub fn context(self, what: impl fmt::Display) -> Self {
        match self {
            Self::Usage(m) => Self::Usage(format!("{what}: {m}")),
            Self::Compute(m) => Self::Compute(format!("{what}: {m}")),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Usage(m) | Self::Compute(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

impl From<bodyschema::Error> for CliError {
    fn from(e: bodyschema::Error) -> Self {
        use bodyschema::Error as E;
        let msg = e.to_string();
        match e {
            E::BehindCamera { .. }
            | E::KeypointBehindCamera { .. }
            | E::BehindCameraAtStep { .. }
            | E::NonFinite(_)
            | E::Divergence { .. }
            | E::RejectionBound { .. } => Self::Compute(msg),
            _ => Self::Usage(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Usage(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub trait Context<T> {
    fn context(self, what: impl fmt::Display) -> CliResult<T>;
}

impl<T, E: Into<CliError>> Context<T> for std::result::Result<T, E> {
    fn context(self, what: impl fmt::Display) -> CliResult<T> {
        self.map_err(|e| e.into().context(what))
    }
}
