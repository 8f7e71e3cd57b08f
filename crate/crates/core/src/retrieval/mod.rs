//! Dynamic evidence retrieval: exact cosine top-k search over the knowledge
//! base and assembly of majority-voted evidence bundles.

mod bundle;
mod index;

use serde::{Deserialize, Serialize};

pub use bundle::{assemble_bundle, EvidenceBundle, EvidenceItem};
pub use index::{Hit, KnowledgeBase, VectorIndex};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Metric {
    #[default]
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    pub k: usize,
    pub exclude_self: bool,
    pub metric: Metric,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig { k: 5, exclude_self: false, metric: Metric::Cosine }
    }
}

impl RetrievalConfig {
    /// Checks the settings needed for majority voting: `k` positive and odd.
    pub fn validate(&self) -> Result<(), RetrievalError> {
        if self.k == 0 {
            return Err(RetrievalError::InvalidK(0));
        }
        if self.k.is_multiple_of(2) {
            return Err(RetrievalError::EvenK(self.k));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error("row {row} ({id}) is a zero vector and cannot be normalized")]
    ZeroVector { row: usize, id: String },
    #[error("query is a zero vector")]
    ZeroQuery,
    #[error("dimension mismatch: index has {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("k={k} exceeds the {eligible} eligible rows")]
    KTooLarge { k: usize, eligible: usize },
    #[error("k must be positive, got {0}")]
    InvalidK(usize),
    #[error("k={0} is even; majority voting needs an odd number of items")]
    EvenK(usize),
    #[error("exclude_self is set but no self id was given")]
    MissingSelfId,
    #[error("index is empty")]
    EmptyIndex,
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("ids ({ids}) and rows ({rows}) disagree")]
    RowCount { ids: usize, rows: usize },
    #[error("corrupt index file: {0}")]
    CorruptIndex(String),
    #[error("invalid evidence bundle: {0}")]
    InvalidBundle(String),
    #[error("unknown entry {0}")]
    UnknownEntry(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
