use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    Tensor(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("class id {class_id} outside vocabulary of size {vocab_size}")]
    Vocabulary { class_id: usize, vocab_size: usize },

    #[error("label {label} out of range for {num_classes} classes")]
    Label { label: usize, num_classes: usize },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("non-finite value in loss term `{term}`")]
    NonFinite { term: &'static str },

    #[error("non-finite loss at step {step} in term `{term}`")]
    Diverged { step: usize, term: &'static str },

    #[error("dataset generation failed: {0}")]
    Generation(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }
}
