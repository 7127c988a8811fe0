use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument for {op}: {detail}")]
    Invalid { op: &'static str, detail: String },

    #[error("invalid model config: {0}")]
    Config(String),

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("missing gradient for parameter `{0}`")]
    MissingGrad(String),

    #[error("batch norm `{0}` evaluated before any statistics were recorded")]
    UninitializedStats(String),

    #[error("{path}: malformed header: {detail}")]
    MalformedHeader { path: String, detail: String },

    #[error("{path}: truncated payload: {detail}")]
    Truncated { path: String, detail: String },

    #[error("{path}: missing sidecar field `{field}`")]
    MissingSidecarField { path: String, field: String },

    #[error("{path}: bad magic bytes")]
    BadMagic { path: String },

    #[error("{path}: unsupported version {found} (expected {expected})")]
    VersionMismatch { path: String, found: u32, expected: u32 },

    #[error("{path}: duplicate tensor name `{name}`")]
    NameCollision { path: String, name: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error on {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Invalid { op, detail: detail.into() }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
