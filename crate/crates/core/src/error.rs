use std::path::PathBuf;

/// Errors raised across the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shapes, widths or hyperparameters that cannot work together.
    #[error("configuration error: {0}")]
    Config(String),

    /// A scalar argument outside its admissible interval.
    #[error("range error: {0}")]
    Range(String),

    /// NaN or infinity observed in activations or a loss.
    #[error("numerical failure in {layer}: non-finite values")]
    NumericalFailure { layer: String },

    #[error("unsupported architecture: {0}")]
    UnsupportedArchitecture(String),

    /// A split definition produced an unusable train or test set.
    #[error("split error ({spec}): {reason}")]
    Split { spec: String, reason: String },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error("annotation parse error in {path}: {reason}")]
    Annotation { path: PathBuf, reason: String },

    /// A pipeline stage failed; the stage name is kept for the run log.
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error("config parse error: {0}")]
    Toml(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn range(msg: impl Into<String>) -> Self {
        Error::Range(msg.into())
    }

    pub(crate) fn in_stage(self, stage: &str) -> Self {
        Error::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }
}

impl From<toml::de::Error> for Error {
    fn from(e: toml::de::Error) -> Self {
        Error::Toml(e.to_string())
    }
}

impl From<toml::ser::Error> for Error {
    fn from(e: toml::ser::Error) -> Self {
        Error::Toml(e.to_string())
    }
}
