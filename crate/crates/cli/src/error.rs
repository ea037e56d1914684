use std::path::PathBuf;

use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {message}")]
    Schema { path: PathBuf, message: String },
    #[error("{0}")]
    Input(String),
    #[error("id mismatch: {message}")]
    IdMismatch { message: String, ids: Vec<String> },
    #[error(transparent)]
    Pipeline(#[from] layoutpnp::Error),
    #[error("evaluation failed its thresholds")]
    EvalFailed,
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

pub const EXIT_INPUT: i32 = 1;
pub const EXIT_PIPELINE: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

/// Machine-readable error line written to stderr.
#[derive(Debug, Serialize)]
pub struct ErrorRecord<'a> {
    pub kind: &'a str,
    pub message: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub object_ids: Vec<String>,
    pub exit_code: i32,
}

impl CliError {
    pub fn schema(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Self::Schema {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::Io { .. } => "io",
            Self::Json { .. } | Self::Schema { .. } => "schema",
            Self::Input(_) => "input",
            Self::IdMismatch { .. } => "id_mismatch",
            Self::Pipeline(layoutpnp::Error::NonFiniteLoss) => "divergence",
            Self::Pipeline(_) => "pipeline",
            Self::EvalFailed => "eval_failed",
        }
    }

    pub fn exit_code(&self) -> i32 {
        use layoutpnp::Error as E;
        match self {
            Self::Io { .. } | Self::Json { .. } | Self::Schema { .. } | Self::Input(_) | Self::IdMismatch { .. } => EXIT_INPUT,
            Self::Pipeline(E::NonFiniteLoss) => EXIT_DIVERGED,
            Self::Pipeline(E::InvalidInput(_) | E::DimensionMismatch { .. } | E::EmptyInput(_)) => EXIT_INPUT,
            Self::Pipeline(_) | Self::EvalFailed => EXIT_PIPELINE,
        }
    }

    pub fn object_ids(&self) -> Vec<String> {
        match self {
            Self::IdMismatch { ids, .. } => ids.clone(),
            Self::Pipeline(layoutpnp::Error::AllObjectsNeglected(ids)) => ids.clone(),
            Self::Pipeline(layoutpnp::Error::MissingTransform(id)) => vec![id.clone()],
            _ => Vec::new(),
        }
    }

    pub fn record(&self) -> ErrorRecord<'_> {
        ErrorRecord {
            kind: self.kind(),
            message: self.to_string(),
            object_ids: self.object_ids(),
            exit_code: self.exit_code(),
        }
    }
}
