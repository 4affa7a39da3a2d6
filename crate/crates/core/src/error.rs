use std::fmt;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate regression basis at step {step}: {reason}")]
    DegenerateBasis { step: usize, reason: String },

    #[error("Picard iteration failed to contract at step {step} (residual {residual:e})")]
    ConvergenceFailure { step: usize, residual: f64 },

    #[error("finite-difference scheme failed: {0}")]
    SchemeFailure(String),

    #[error("{0}")]
    Config(ConfigErrors),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}

/// One problem found while reading a run configuration, located by its
/// dotted key path (`domain.radius`, `sweep.n[2]`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigIssue {
    pub path: String,
    pub message: String,
}

/// Every issue found in a configuration, not just the first.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConfigErrors(pub Vec<ConfigIssue>);

impl ConfigErrors {
    pub fn push(&mut self, path: impl Into<String>, message: impl Into<String>) {
        self.0.push(ConfigIssue {
            path: path.into(),
            message: message.into(),
        });
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn issues(&self) -> &[ConfigIssue] {
        &self.0
    }
}

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} configuration error(s):", self.0.len())?;
        for issue in &self.0 {
            writeln!(f, "  {}: {}", issue.path, issue.message)?;
        }
        Ok(())
    }
}
