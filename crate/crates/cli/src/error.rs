use std::fmt;
use std::path::Path;
use std::process::ExitCode;

use hatemask_core::corpus::CorpusError;
use hatemask_core::text::TextError;
use hatemask_core::ModelError;
use hatemask_nn::NnError;

#[derive(Debug)]
pub enum CliError {
    /// Every configuration problem found, exit code 2.
    Config(Vec<String>),
    /// Missing or malformed inputs, exit code 3.
    Data(String),
    /// Non-finite values or other numeric failures during a run, exit code 4.
    Numeric(String),
}

impl CliError {
    pub fn config(errors: Vec<String>) -> Self {
        CliError::Config(errors)
    }

    pub fn data(message: impl Into<String>) -> Self {
        CliError::Data(message.into())
    }

    pub fn io(path: &Path, err: std::io::Error) -> Self {
        CliError::Data(format!("{}: {err}", path.display()))
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        })
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(errors) => {
                write!(f, "invalid configuration ({} problem{}):", errors.len(), if errors.len() == 1 { "" } else { "s" })?;
                for e in errors {
                    write!(f, "\n  - {e}")?;
                }
                Ok(())
            }
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric error: {m}"),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(err: ModelError) -> Self {
        match err {
            ModelError::Nn(e) => e.into(),
            ModelError::InvalidConfig(errors) => CliError::Config(errors),
            ModelError::ConfigMismatch(_) | ModelError::InputTooShort { .. } => CliError::Config(vec![err.to_string()]),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<NnError> for CliError {
    fn from(err: NnError) -> Self {
        match err {
            NnError::NonFinite(_) | NnError::Domain(_) | NnError::NoValidTargets => CliError::Numeric(err.to_string()),
            NnError::DimNotDivisible { .. } | NnError::InputTooShort { .. } => CliError::Config(vec![err.to_string()]),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<CorpusError> for CliError {
    fn from(err: CorpusError) -> Self {
        CliError::Data(err.to_string())
    }
}

impl From<TextError> for CliError {
    fn from(err: TextError) -> Self {
        CliError::Data(err.to_string())
    }
}
