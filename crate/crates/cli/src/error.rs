use std::fmt;

/// Failure classes mapped onto the process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Unreadable or invalid input: exit 2.
    Input(String),
    /// A check ran and did not pass: exit 1.
    Check(String),
}

impl CliError {
    pub fn input(msg: impl Into<String>) -> Self {
        Self::Input(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Input(_) => 2,
            Self::Check(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Input(m) => write!(f, "error: {m}"),
            Self::Check(m) => write!(f, "check failed: {m}"),
        }
    }
}

impl From<rhythm_ssm::Error> for CliError {
    fn from(e: rhythm_ssm::Error) -> Self {
        let msg = e.to_string();
        match e {
            rhythm_ssm::Error::Divergence(_) => Self::Check(msg),
            _ => Self::Input(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Input(e.to_string())
    }
}
