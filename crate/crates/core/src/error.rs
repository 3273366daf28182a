use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("timestep {t} outside schedule range [0, {max})")]
    TimestepOutOfRange { t: usize, max: usize },

    #[error("layer {layer} outside model depth {depth}")]
    LayerOutOfRange { layer: usize, depth: usize },

    #[error("schedule violation: next timestep {next} must precede {current}")]
    ScheduleViolation { current: usize, next: usize },

    #[error("simulation diverged at frame {frame}")]
    SimulationDiverged { frame: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("parameters are frozen")]
    Frozen,

    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),

    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    #[error("missing coordinate: {0}")]
    MissingCoordinate(String),

    #[error("unknown {kind} `{name}`")]
    UnknownName { kind: &'static str, name: String },

    #[error("bad file format in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("checksum mismatch in {path}: stored {stored:08x}, computed {computed:08x}")]
    Checksum { path: PathBuf, stored: u32, computed: u32 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config error: {0}")]
    Config(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(PathBuf),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }

    /// True for errors that stem from configuration or missing inputs rather
    /// than from a failure while running a stage.
    pub fn is_config_error(&self) -> bool {
        matches!(self, Error::Config(_) | Error::MissingArtifact(_) | Error::UnknownName { .. })
    }
}
