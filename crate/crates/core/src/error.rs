use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("calibration error: band {band} has white {white} <= dark {dark}")]
    Calibration { band: usize, white: f64, dark: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("checksum mismatch: header says {expected:08x}, payload hashes to {actual:08x}")]
    Checksum { expected: u32, actual: u32 },

    #[error("model was trained on dataset {expected}, this dataset hashes to {actual} (use --force to override)")]
    HashMismatch { expected: String, actual: String },

    #[error("scene generation failed: {0}")]
    Scene(String),

    #[error("non-finite value in layer {layer}")]
    NonFinite { layer: usize },

    #[error("training diverged at epoch {epoch}")]
    Divergence { epoch: usize },

    #[error("insufficient training data: {0}")]
    InsufficientData(String),

    #[error("unknown cluster id {0}")]
    UnknownCluster(u32),

    #[error("I/O error")]
    Io(#[from] std::io::Error),

    #[error("JSON error")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by bad user configuration rather than bad data.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::InvalidArgument(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
