use std::path::PathBuf;

use holounfold::error::Error as CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{0}")]
    Input(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Core(#[from] CoreError),
}

impl CliError {
    pub const EXIT_CONFIG: u8 = 2;
    pub const EXIT_IO: u8 = 3;
    pub const EXIT_NUMERIC: u8 = 4;

    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) => Self::EXIT_CONFIG,
            Self::Io { .. } | Self::Csv { .. } | Self::Input(_) => Self::EXIT_IO,
            Self::Numeric(_) => Self::EXIT_NUMERIC,
            Self::Core(e) => match e {
                CoreError::Config(_)
                | CoreError::InvalidArgument(_)
                | CoreError::Indivisible { .. }
                | CoreError::StageMismatch { .. }
                | CoreError::Dimensions(_)
                | CoreError::ShapeMismatch(_) => Self::EXIT_CONFIG,
                CoreError::Io { .. } | CoreError::Image { .. } | CoreError::EmptyDataset(_) | CoreError::Weights(_) => {
                    Self::EXIT_IO
                }
                CoreError::NonFinite(_) | CoreError::Autodiff(_) => Self::EXIT_NUMERIC,
            },
        }
    }
}

pub fn io_error(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
    let path = path.into();
    move |source| CliError::Io { path, source }
}
