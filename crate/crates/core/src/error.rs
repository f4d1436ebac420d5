use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimensions: {0}")]
    Dimensions(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid optical configuration: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(
        "input {height}x{width} is not divisible by 32; nearest valid size is {suggested_height}x{suggested_width}"
    )]
    Indivisible {
        height: usize,
        width: usize,
        suggested_height: usize,
        suggested_width: usize,
    },
    #[error("stage count {stages} does not match {weights} weight sets")]
    StageMismatch { stages: usize, weights: usize },
    #[error(transparent)]
    Autodiff(#[from] crate::autodiff::AutodiffError),
    #[error(transparent)]
    Weights(#[from] crate::pcd::WeightsError),
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("dataset {0} contains no images")]
    EmptyDataset(PathBuf),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
