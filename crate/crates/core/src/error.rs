use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failures reading or writing the adapter container format.
#[derive(Debug, Error)]
pub enum ArtifactError {
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("payload checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("truncated artifact: {0}")]
    Truncated(String),
    #[error("malformed artifact: {0}")]
    Malformed(String),
}

impl ArtifactError {
    /// Stable numeric code, one per failure kind.
    pub fn code(&self) -> u8 {
        match self {
            ArtifactError::BadMagic(_) => 10,
            ArtifactError::UnsupportedVersion(_) => 11,
            ArtifactError::Checksum { .. } => 12,
            ArtifactError::Truncated(_) => 13,
            ArtifactError::Malformed(_) => 14,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("index out of range: {0}")]
    Index(String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("incompatible adapters: {0}")]
    Incompatible(String),
    #[error("insufficient data: {0}")]
    Count(String),
    #[error("label mismatch: {0}")]
    Label(String),
    #[error("loss diverged at iteration {iteration}: {detail}")]
    Divergence { iteration: usize, detail: String },
    #[error("training failed: {0}")]
    Training(String),
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Serde(String),
}

impl Error {
    /// Short machine-parsable class name used by the CLI.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Index(_) => "index",
            Error::Validation(_) => "validation",
            Error::State(_) => "state",
            Error::Config(_) => "config",
            Error::Incompatible(_) => "incompatible",
            Error::Count(_) => "count",
            Error::Label(_) => "label",
            Error::Divergence { .. } => "divergence",
            Error::Training(_) => "training",
            Error::Artifact(_) => "artifact",
            Error::Io(_) => "io",
            Error::Serde(_) => "serde",
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<toml::de::Error> for Error {
    fn from(e: toml::de::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
