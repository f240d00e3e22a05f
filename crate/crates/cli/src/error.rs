use orthosep::Error;

/// An error with the process exit code it maps to: 1 numerical or
/// self-test failure, 2 configuration error, 3 I/O error.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn numerical(msg: impl Into<String>) -> Self {
        CliError { code: 1, message: msg.into() }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        CliError { code: 2, message: msg.into() }
    }

    pub fn io(msg: impl Into<String>) -> Self {
        CliError { code: 3, message: msg.into() }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Io { .. } | Error::Header { .. } | Error::UnknownDtype(_) | Error::LengthMismatch { .. } => {
                CliError::io(msg)
            }
            Error::InvalidGrid(_)
            | Error::InvalidParameter(_)
            | Error::UnknownChannel(_)
            | Error::EmptySelection(_)
            | Error::DimensionMismatch(_)
            | Error::Json(_) => CliError::config(msg),
            Error::Unsanitized(_)
            | Error::DegenerateChannel(..)
            | Error::NonFinite(_)
            | Error::NonFiniteActivation { .. }
            | Error::NoOrthogonalContent
            | Error::IndexOutOfRange { .. } => CliError::numerical(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::io(e.to_string())
    }
}
