use fewshot_core::Error as CoreError;
use thiserror::Error;

/// Command failures, each tied to one process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad or inconsistent configuration, missing checkpoints or reference sets.
    #[error("config error: {0}")]
    Config(String),

    /// A loss, parameter or metric went non-finite.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Unreadable, empty or out-of-contract input data.
    #[error("invalid input: {0}")]
    Input(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Numeric(_) => 3,
            Self::Input(_) => 4,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let msg = e.to_string();
        match e {
            CoreError::NumericFailure(_) | CoreError::Tensor(_) => Self::Numeric(msg),
            CoreError::Checkpoint(_) | CoreError::Json(_) => Self::Config(msg),
            CoreError::InvalidArgument(_) | CoreError::UndefinedMetric(_) | CoreError::Image(_) | CoreError::Io(_) => {
                Self::Input(msg)
            }
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

macro_rules! config_err {
    ($($arg:tt)*) => {
        $crate::error::CliError::Config(format!($($arg)*))
    };
}

pub(crate) use config_err;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Config(String::new()).exit_code(), 2);
        assert_eq!(CliError::from(CoreError::NumericFailure("nan".into())).exit_code(), 3);
        assert_eq!(CliError::from(CoreError::InvalidArgument("11 images".into())).exit_code(), 4);
        assert_eq!(CliError::from(CoreError::Checkpoint("bad header".into())).exit_code(), 2);
    }
}
