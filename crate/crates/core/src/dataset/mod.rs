//! Training-data construction: stage partitioning, sample typing, teacher
//! generation of gold chain-of-thought targets, and per-stage exports.

mod export;
mod partition;
mod recipe;
mod teacher;

use serde::{Deserialize, Serialize};

use crate::fcot::{parse_fcot, ParseMode, PromptMessage, SampleKind};
use crate::fkd::Label;
use crate::gateway::GatewayError;
use crate::retrieval::EvidenceBundle;

pub use export::{
    export_stage1_vqa, export_stage2_sft, export_stage3_prompts, stage2_record, LabeledFrame, Stage2Report,
};
pub use partition::{partition_digest, partition_stages, split_stage23, Stage23Split, StagePartition};
pub use recipe::{export_training_recipe, AdapterParams, Stage, TrainingRecipe};
pub use teacher::{build_fcot_sample, build_fcot_samples, teacher_request, TeacherConfig, TeacherStats};

/// Maps Stage-1 correctness and retrieval correctness to a sample type.
pub fn classify_sample(s1_correct: bool, rag_correct: bool) -> SampleKind {
    match (s1_correct, rag_correct) {
        (true, _) => SampleKind::CrossVerification,
        (false, true) => SampleKind::EvidenceGuidedCorrection,
        (false, false) => SampleKind::ResilientRejection,
    }
}

/// The preliminary judgment a gold response of this kind should open with.
pub fn gold_s1(kind: SampleKind, ground_truth: Label) -> Label {
    match kind {
        SampleKind::EvidenceGuidedCorrection => ground_truth.flipped(),
        SampleKind::CrossVerification | SampleKind::ResilientRejection => ground_truth,
    }
}

/// How the Stage-1 prediction used for typing was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum InferenceMode {
    #[default]
    WithoutRag,
    WithRag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: String,
    pub video_id: String,
    pub image_ref: String,
    pub ground_truth: Label,
    pub s1_pred: Option<Label>,
    #[serde(default)]
    pub s1_mode: InferenceMode,
    pub bundle: EvidenceBundle,
    pub kind: SampleKind,
    #[serde(default)]
    pub gold_fcot: Option<String>,
    pub teacher_template_id: String,
    #[serde(default)]
    pub teacher_attempts: u32,
}

impl SampleRecord {
    /// Types the sample from its Stage-1 prediction and bundle. An unknown
    /// prediction counts as incorrect.
    pub fn new(
        sample_id: impl Into<String>,
        video_id: impl Into<String>,
        image_ref: impl Into<String>,
        ground_truth: Label,
        s1_pred: Option<Label>,
        s1_mode: InferenceMode,
        bundle: EvidenceBundle,
    ) -> Self {
        let bundle = bundle.with_ground_truth(ground_truth);
        let kind = classify_sample(s1_pred == Some(ground_truth), bundle.majority_label == ground_truth);
        SampleRecord {
            sample_id: sample_id.into(),
            video_id: video_id.into(),
            image_ref: image_ref.into(),
            ground_truth,
            s1_pred,
            s1_mode,
            bundle,
            kind,
            gold_fcot: None,
            teacher_template_id: kind.template_id().to_string(),
            teacher_attempts: 0,
        }
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let invalid = |reason: String| DatasetError::InvalidSample { sample_id: self.sample_id.clone(), reason };
        let rag_correct = self.bundle.majority_label == self.ground_truth;
        let expected = classify_sample(self.s1_pred == Some(self.ground_truth), rag_correct);
        if expected != self.kind {
            return Err(invalid(format!("kind {} but classification gives {expected}", self.kind)));
        }
        if let Some(gold) = &self.gold_fcot {
            let parsed = parse_fcot(gold, ParseMode::Strict);
            if !parsed.format_valid {
                return Err(invalid(format!("gold is not well formed: {}", parsed.violation_codes().join(", "))));
            }
            if parsed.answer != Some(self.ground_truth) {
                return Err(invalid("gold answer differs from ground truth".into()));
            }
        }
        Ok(())
    }
}

/// One line of an exported dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub sample_id: String,
    pub video_id: String,
    pub image_ref: String,
    pub prompt: Vec<PromptMessage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
    pub label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<SampleKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bundle: Option<EvidenceBundle>,
}

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("stage-1 count {requested} must be below the {available} available videos")]
    CountTooLarge { requested: usize, available: usize },
    #[error("video {0} appears more than once")]
    DuplicateVideo(String),
    #[error("split fraction {0} is outside [0, 1]")]
    BadFraction(f64),
    #[error("sample {0} has no gold response")]
    MissingGold(String),
    #[error("sample {sample_id}: {reason}")]
    InvalidSample { sample_id: String, reason: String },
    #[error("teacher failed for sample {sample_id} after {attempts} attempts: {last}")]
    TeacherFormatFailure { sample_id: String, attempts: u32, last: String },
    #[error("sample {sample_id} uses video {video_id}, which an earlier stage already used")]
    VideoLeak { sample_id: String, video_id: String },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Template(#[from] crate::fcot::FcotError),
    #[error(transparent)]
    Jsonl(#[from] crate::jsonl::JsonlError),
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::{assemble_bundle, EvidenceItem};

    pub(crate) fn bundle(majority: Label) -> EvidenceBundle {
        let items = (0..5)
            .map(|i| EvidenceItem {
                entry_id: format!("e{i}"),
                label: if i % 2 == 0 { majority } else { majority.flipped() },
                similarity: 0.9 - i as f64 * 0.05,
                annotation: format!("[Skin]: note {i}"),
            })
            .collect();
        assemble_bundle("q", items, None).unwrap()
    }

    #[test]
    fn truth_table() {
        assert_eq!(classify_sample(true, true), SampleKind::CrossVerification);
        assert_eq!(classify_sample(true, false), SampleKind::CrossVerification);
        assert_eq!(classify_sample(false, true), SampleKind::EvidenceGuidedCorrection);
        assert_eq!(classify_sample(false, false), SampleKind::ResilientRejection);
    }

    #[test]
    fn record_typing() {
        let r = SampleRecord::new(
            "s",
            "v",
            "i.png",
            Label::Fake,
            Some(Label::Real),
            InferenceMode::WithoutRag,
            bundle(Label::Fake),
        );
        assert_eq!(r.kind, SampleKind::EvidenceGuidedCorrection);
        assert_eq!(r.bundle.rag_correct, Some(true));
        assert_eq!(r.teacher_template_id, "cot_evidence_guided_correction");
        let r = SampleRecord::new("s", "v", "i.png", Label::Fake, None, InferenceMode::WithoutRag, bundle(Label::Real));
        assert_eq!(r.kind, SampleKind::ResilientRejection);
        assert!(r.validate().is_ok());
        let mut bad = r.clone();
        bad.kind = SampleKind::CrossVerification;
        assert!(bad.validate().is_err());
        let mut bad_gold = r;
        bad_gold.gold_fcot = Some("<Answer> Fake </Answer>".into());
        assert!(bad_gold.validate().is_err());
    }

    #[test]
    fn gold_s1_by_kind() {
        assert_eq!(gold_s1(SampleKind::CrossVerification, Label::Fake), Label::Fake);
        assert_eq!(gold_s1(SampleKind::EvidenceGuidedCorrection, Label::Fake), Label::Real);
        assert_eq!(gold_s1(SampleKind::ResilientRejection, Label::Real), Label::Real);
    }
}
