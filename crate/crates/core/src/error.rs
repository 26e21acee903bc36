use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("tensor backend: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image decode/encode failed for {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("sample {id}: {reason}")]
    SampleRejected { id: String, reason: String },

    #[error("adapter `{adapter}` failed{}: {reason}", .id.as_ref().map(|i| format!(" on sample {i}")).unwrap_or_default())]
    Adapter {
        adapter: String,
        id: Option<String>,
        reason: String,
    },

    #[error("non-finite activation in {0}")]
    NonFiniteActivation(String),

    #[error(
        "non-finite loss at step {step}: adv={adv} hrfpl={hrfpl} rec={rec} d_loss={d_loss} \
         |grad G|={grad_norm_g} |grad D|={grad_norm_d}"
    )]
    NonFiniteLoss {
        step: u64,
        adv: f64,
        hrfpl: f64,
        rec: f64,
        d_loss: f64,
        grad_norm_g: f64,
        grad_norm_d: f64,
    },

    #[error("non-face pixels of the composited output diverged from the source at step {step}")]
    IntegrityViolation { step: u64 },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("unsupported checkpoint format version {found} (this build reads {supported})")]
    CheckpointVersion { found: u32, supported: u32 },

    #[error("resume config mismatch on: {}", .0.join(", "))]
    ConfigMismatch(Vec<String>),

    #[error("evaluation: {0}")]
    Evaluation(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(
        context: &'static str,
        expected: impl std::fmt::Display,
        actual: impl std::fmt::Display,
    ) -> Self {
        Error::Shape {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
