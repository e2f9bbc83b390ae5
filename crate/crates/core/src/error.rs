use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("ingestion failed: {message}: {}", display_paths(.paths))]
    Ingestion {
        message: String,
        paths: Vec<PathBuf>,
    },

    #[error("cannot decode {}: {source}", .path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("split error: class `{class}` has {count} samples, at least 3 required")]
    Split { class: String, count: usize },

    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("checkpoint error in `{field}`: {message}")]
    Checkpoint { field: String, message: String },

    #[error("export error: {0}")]
    Export(String),

    #[error("model file error in `{field}`: {message}")]
    ModelFile { field: String, message: String },

    #[error("pack error: value {value} at index {index} does not fit in {bits} bits")]
    Pack { index: usize, value: i64, bits: u32 },

    #[error("csv error in {}: {message}", .path.display())]
    Csv { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn display_paths(paths: &[PathBuf]) -> String {
    paths
        .iter()
        .map(|p| p.display().to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}

pub(crate) fn contract_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Contract(msg.into()))
}
