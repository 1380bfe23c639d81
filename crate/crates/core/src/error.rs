use thiserror::Error;

/// Errors produced by the estimation pipeline.
///
/// `Schema`, `Csv`, and `Data` describe bad inputs; `Config` describes bad
/// settings; `Numerical` covers degenerate arithmetic (singular systems,
/// failed bisection); `Model` covers serialization issues. The CLI maps
/// input errors to exit code 2 and numerical errors to exit code 3.
#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("csv error in {path}: {message}")]
    Csv { path: String, message: String },

    #[error("data error at row {row}, column {column}: {message}")]
    Data {
        row: usize,
        column: String,
        message: String,
    },

    #[error("invalid sample: {0}")]
    Sample(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("model file error: {0}")]
    Model(String),

    #[error("unseen category '{value}' for feature '{feature}'")]
    UnseenCategory { feature: String, value: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
