//! Core of the retrieval-augmented deepfake detection pipeline toolkit.

pub mod dataset;
pub mod eval;
pub mod fcot;
pub mod fkd;
pub mod gateway;
pub mod jsonl;
pub mod retrieval;
pub mod reward;

pub use fcot::{FCotResponse, SampleKind};
pub use fkd::{KnowledgeEntry, Label, ManipulationMethod};
pub use retrieval::EvidenceBundle;
pub use reward::{RewardConfig, RewardRecord};
