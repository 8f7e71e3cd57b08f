//! Line-delimited record types read and written by the commands.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use vrag_core::fkd::{Label, ManipulationMethod, MediaRef};
use vrag_core::gateway::TokenLogprob;

use crate::CliError;

/// One frame to retrieve for, classify or run inference on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub sample_id: String,
    pub video_id: String,
    pub frame_id: String,
    pub image_ref: String,
    #[serde(default)]
    pub label: Option<Label>,
    /// Inline query embedding.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vector: Option<Vec<f32>>,
    /// Corpus entry whose embedding is the query.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vector_ref: Option<String>,
    /// Corpus entry to leave out of the results; defaults to `vector_ref`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub self_id: Option<String>,
}

impl FrameRecord {
    pub fn self_id(&self) -> Option<&str> {
        self.self_id.as_deref().or(self.vector_ref.as_deref())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InventoryRecord {
    pub video_id: String,
    pub label: Label,
    pub frames: usize,
}

/// A frame the teacher should describe for the knowledge base.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationJob {
    pub media_ref: MediaRef,
    pub method: ManipulationMethod,
    pub image: String,
    /// The pristine source frame, for manipulated images.
    #[serde(default)]
    pub original_image: Option<String>,
    pub embedding_id: String,
}

/// Ranked retrieval output for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalRow {
    pub query_id: String,
    pub entry_ids: Vec<String>,
    pub similarities: Vec<f64>,
}

/// A Stage-1 prediction supplied from outside.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub sample_id: String,
    pub s1_pred: Option<Label>,
}

/// A policy response with what is needed to reward and score it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub sample_id: String,
    #[serde(default)]
    pub video_id: String,
    #[serde(default)]
    pub frame_id: String,
    #[serde(default)]
    pub image_ref: String,
    pub text: String,
    pub ground_truth: Label,
    pub rag_majority: Label,
    /// Rollouts sharing a group key are normalized together.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<TokenLogprob>>,
}

/// Rounds to six decimals for stable text output.
pub fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

/// Reads non-blank lines, keeping each record's 1-based line number.
pub fn read_numbered<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>, CliError> {
    let file = File::open(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line)
            .map_err(|e| CliError::Validation(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push((i + 1, record));
    }
    Ok(out)
}
