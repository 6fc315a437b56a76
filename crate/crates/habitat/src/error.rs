use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = HabitatError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum HabitatError {
    #[error(transparent)]
    Core(#[from] habitat_core::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid taxonomy file {path}: {message}")]
    TaxonomyFile { path: PathBuf, message: String },

    #[error("directories not in the taxonomy: {}", .0.join(", "))]
    UnknownClassDirectories(Vec<String>),

    #[error("no readable images under {0}")]
    NoImages(PathBuf),

    #[error("cannot decode image {name}: {message}")]
    Decode { name: String, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("tensor shape error: {0}")]
    Shape(String),

    #[error("could not fetch pretrained weights from {url}: {message} (retriable)")]
    WeightFetch { url: String, message: String },

    #[error("checkpoint is incompatible: {0}")]
    Compatibility(String),

    #[error("checkpoint integrity check failed: {0}")]
    Integrity(String),

    #[error(
        "out of memory during training ({0}); try a smaller --batch-size or --input-size"
    )]
    OutOfMemory(String),

    #[error("loss became non-finite at epoch {epoch}, step {step}: {diagnostics}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        diagnostics: String,
    },

    #[error("fold {fold} failed: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<HabitatError>,
    },

    #[error("tensor backend: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl HabitatError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HabitatError::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether retrying the same operation may succeed.
    pub fn is_retriable(&self) -> bool {
        matches!(self, HabitatError::WeightFetch { .. })
    }
}

/// Attaches a path to an `std::io::Result`.
pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|e| HabitatError::io(path, e))
    }
}
