use thiserror::Error;

/// Errors raised by the enhancement pipeline and its file formats.
#[derive(Debug, Error)]
pub enum Error {
    #[error("input too short: {samples} samples but one window needs {window}")]
    InputTooShort { samples: usize, window: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("{0}")]
    Wav(String),

    #[error("{0}")]
    MaskFile(String),

    #[error("config: {0}")]
    Config(String),

    #[error("geometry: {0}")]
    Geometry(String),

    #[error("degenerate mask at frequency bin {bin}: {reason}")]
    DegenerateMask { bin: usize, reason: String },

    #[error("steering vector undefined at reference (frequency bin {bin})")]
    SteeringUndefined { bin: usize },

    #[error("numerical failure at frequency bin {bin}: {reason}")]
    Numerical { bin: usize, reason: String },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("trial {trial} at {snr_db} dB: {source}")]
    Trial {
        trial: usize,
        snr_db: f64,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        if let Error::Trial { source, .. } = self {
            return source.is_numerical();
        }
        matches!(
            self,
            Error::Numerical { .. } | Error::SteeringUndefined { .. } | Error::DegenerateMask { .. }
        )
    }

    /// True for malformed command-line or config input.
    pub fn is_usage(&self) -> bool {
        if let Error::Trial { source, .. } = self {
            return source.is_usage();
        }
        matches!(self, Error::Config(_) | Error::InvalidParameter(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
