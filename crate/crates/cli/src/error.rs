use vrag_core::dataset::DatasetError;
use vrag_core::eval::EvalError;
use vrag_core::fcot::FcotError;
use vrag_core::fkd::FkdError;
use vrag_core::gateway::GatewayError;
use vrag_core::jsonl::JsonlError;
use vrag_core::retrieval::RetrievalError;
use vrag_core::reward::RewardError;

/// A command failure, split by exit code: bad inputs or configuration (1)
/// versus failures while doing the work (2).
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    /// Prefixes the message with where it happened.
    pub fn context(self, what: impl std::fmt::Display) -> Self {
        match self {
            CliError::Validation(m) => CliError::Validation(format!("{what}: {m}")),
            CliError::Runtime(m) => CliError::Runtime(format!("{what}: {m}")),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<JsonlError> for CliError {
    fn from(e: JsonlError) -> Self {
        match e {
            JsonlError::Parse { .. } => CliError::Validation(e.to_string()),
            JsonlError::Io { .. } => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<FkdError> for CliError {
    fn from(e: FkdError) -> Self {
        match e {
            FkdError::Io(_) => CliError::Runtime(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<RetrievalError> for CliError {
    fn from(e: RetrievalError) -> Self {
        match e {
            RetrievalError::Io(_) => CliError::Runtime(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<GatewayError> for CliError {
    fn from(e: GatewayError) -> Self {
        match e {
            GatewayError::Config(_) | GatewayError::InvalidRequest(_) => CliError::Validation(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<FcotError> for CliError {
    fn from(e: FcotError) -> Self {
        match e {
            FcotError::Io { .. } => CliError::Runtime(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Gateway(g) => g.into(),
            DatasetError::Template(t) => t.into(),
            DatasetError::Jsonl(j) => j.into(),
            DatasetError::TeacherFormatFailure { .. } => CliError::Runtime(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Gateway(g) => g.into(),
            EvalError::Template(t) => t.into(),
            EvalError::JudgeFormatFailure { .. } => CliError::Runtime(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<RewardError> for CliError {
    fn from(e: RewardError) -> Self {
        CliError::Validation(e.to_string())
    }
}
