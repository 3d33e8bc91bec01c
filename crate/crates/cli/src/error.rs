//! Command errors, split by exit code.

use rxconsensus::store::StoreError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Missing files, bad flags, unusable registry or script. Exit code 2.
    #[error("configuration error: {0:#}")]
    Config(anyhow::Error),
    /// Inputs that load but cannot be used. Exit code 3.
    #[error("data error: {0:#}")]
    Data(anyhow::Error),
}

impl CliError {
    pub fn config(e: impl Into<anyhow::Error>) -> Self {
        CliError::Config(e.into())
    }

    pub fn data(e: impl Into<anyhow::Error>) -> Self {
        CliError::Data(e.into())
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
        }
    }
}

/// Unreadable files are configuration problems; files that read but do not
/// validate are data problems.
impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::Io { .. } | StoreError::InvalidRegistry { .. } | StoreError::Locked { .. } => {
                CliError::config(e)
            }
            _ => CliError::data(e),
        }
    }
}
