use gridformer_core::Error;

/// Splits failures into the two exit codes: bad input (1) and everything
/// that goes wrong while running (2).
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::InvalidArgument(_)
            | Error::UnknownVariable(_)
            | Error::ShapeMismatch { .. }
            | Error::MissingParameter(_)
            | Error::ZeroStd(_)
            | Error::Format { .. } => CliError::Validation(msg),
            Error::NonFinite { .. } | Error::Io(_) | Error::Json(_) | Error::Csv(_) => CliError::Runtime(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}
