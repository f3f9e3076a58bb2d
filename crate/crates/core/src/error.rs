use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Non-finite values were passed into an operation.
    #[error("non-finite input: {0}")]
    NumericInput(String),

    /// A computation produced non-finite values.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Training diverged. `last_finite` carries the parameters from the last
    /// step where the loss was still finite.
    #[error("training failed at step {step}: {reason}")]
    TrainingFailure {
        step: usize,
        reason: String,
        last_finite: Vec<f64>,
    },

    #[error("task {task_id}: {source}")]
    Task {
        task_id: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("zoo is degenerate: every dimension has zero spread")]
    DegenerateZoo,

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt file: {0}")]
    Corruption(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("no results: {0}")]
    NoResults(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) | Error::Config(_) => 2,
            Error::NumericInput(_)
            | Error::Numeric(_)
            | Error::TrainingFailure { .. }
            | Error::DegenerateZoo => 4,
            Error::Task { source, .. } => source.exit_code(),
            Error::Format(_)
            | Error::Corruption(_)
            | Error::MissingArtifact(_)
            | Error::NoResults(_)
            | Error::Io(_)
            | Error::Json(_) => 3,
        }
    }
}
