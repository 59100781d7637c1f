use std::fmt;

use oprisk::Error;

#[derive(Debug)]
pub enum CliError {
    /// Bad configuration or input; nothing was written.
    Validation(String),
    Numerical(String),
    Budget(String),
    /// Writing outputs failed.
    Output(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Budget(_) => 4,
            CliError::Output(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "invalid input: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
            CliError::Budget(m) => write!(f, "{m}"),
            CliError::Output(m) => write!(f, "cannot write output: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

fn is_validation(e: &Error) -> bool {
    match e {
        Error::MalformedRow { .. }
        | Error::EmptyInput
        | Error::InvalidInput(_)
        | Error::Io(_)
        | Error::Csv(_)
        | Error::Json(_) => true,
        Error::Margin { source, .. } => is_validation(source),
        _ => false,
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        if matches!(e, Error::FailureBudget { .. }) {
            CliError::Budget(e.to_string())
        } else if is_validation(&e) {
            CliError::Validation(e.to_string())
        } else {
            CliError::Numerical(e.to_string())
        }
    }
}
