use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    /// Token/checkpoint metadata disagrees with the loaded model.
    #[error("mismatch: {0}")]
    Mismatch(String),

    /// Malformed file content. `field` names the offending field.
    #[error("{file}: bad field `{field}`: {msg}")]
    Format {
        file: String,
        field: String,
        msg: String,
    },

    #[error("loss became non-finite at step {step} (last finite total: {last_total:?})")]
    NanLoss {
        step: usize,
        last_total: Option<f64>,
    },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("wav: {0}")]
    Wav(#[from] hound::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn format(
        file: impl Into<String>,
        field: impl Into<String>,
        msg: impl Into<String>,
    ) -> Self {
        Error::Format {
            file: file.into(),
            field: field.into(),
            msg: msg.into(),
        }
    }
}
