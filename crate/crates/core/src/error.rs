//! Crate-wide error type.

/// Errors produced anywhere in the pipeline.
///
/// Variants are grouped by failure class rather than by module so that
/// callers (in particular the CLI) can map them onto user-facing
/// diagnostics and exit codes uniformly.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid static configuration (block sizes, widths, step lists...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Arrays whose shapes do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// A scalar or structured argument outside its documented domain.
    #[error("parameter error: {0}")]
    Param(String),

    /// Attention injection asked for a trace entry that was never captured.
    #[error("injection error: no trace entry for layer '{layer}' at timestep {timestep}")]
    Injection { layer: String, timestep: usize },

    /// A prompt template slot with no binding.
    #[error("template error: unbound slot '{0}'")]
    Template(String),

    /// Dataset files that cannot be read or fail validation.
    #[error("ingestion error: {0}")]
    Ingestion(String),

    /// A stratified split that cannot be satisfied.
    #[error("stratification error: {0}")]
    Stratification(String),

    /// Malformed run or manifest input.
    #[error("validation error: {0}")]
    Validation(String),

    /// Caption gateway failures (transport, protocol, exhausted retries).
    #[error("gateway error: {0}")]
    Gateway(String),

    /// Checkpoint or adapter files with a bad or mismatched layout.
    #[error("format error: {0}")]
    Format(String),

    /// Numerically ill-conditioned inputs (for example a covariance with a
    /// clearly negative eigenvalue).
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(String),

    #[error("serialization error: {0}")]
    Serialization(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Image(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
