use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum GcavError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("unknown layer `{0}`")]
    UnknownLayer(String),
    #[error("unknown class {0}")]
    UnknownClass(usize),
    #[error("unknown concept `{0}`")]
    UnknownConcept(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid input to {op}: {msg}")]
    InvalidInput { op: &'static str, msg: String },
    #[error("target model reached training accuracy {accuracy:.4} after {epochs} epochs (< 0.95)")]
    TargetUndertrained { accuracy: f64, epochs: usize },
    #[error("CAV orientation is undetermined: mean projections tie at {value}")]
    DegenerateCav { value: f64 },
    #[error(
        "autoencoder for layer `{layer}` did not converge: final loss {loss:.5} > {threshold}"
    )]
    NonConvergence {
        layer: String,
        loss: f64,
        threshold: f64,
    },
    #[error(
        "embedding collapse: mean cosine between random and concept projections is {cosine:.4} (> {threshold})"
    )]
    Collapse { cosine: f64, threshold: f64 },
    #[error("{stage}: non-finite loss at step {step} (τ {tau:?}, last finite loss {last:?})")]
    NonFiniteLoss {
        stage: &'static str,
        step: usize,
        tau: Option<f64>,
        last: Option<f64>,
    },
    #[error("missing artifact `{0}`")]
    MissingArtifact(String),
    #[error("stage `{reader}` may not read `{key}` written by stage `{writer}`")]
    StageOrder {
        reader: String,
        writer: String,
        key: String,
    },
    #[error("checksum mismatch for artifact `{0}`")]
    Checksum(String),
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
}

pub type Result<T, E = GcavError> = std::result::Result<T, E>;

impl GcavError {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| Self::Io { path, source }
    }

    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Self::InvalidInput {
            op,
            msg: msg.into(),
        }
    }
}
