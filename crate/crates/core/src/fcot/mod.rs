//! Forensic chain-of-thought responses: the four-section grammar, its parser
//! and serializer, evidence rendering and prompt templates.

mod evidence;
mod parser;
mod template;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::fkd::Label;

pub use evidence::{format_evidence_block, EvidenceBlock};
pub use parser::{extract_s1_pred, parse_fcot, serialize_fcot};
pub use template::{
    annotation_template_id, render_prompt, PromptMessage, PromptTemplate, Role, TemplateSet, INFER_TEMPLATE,
    JUDGE_TEMPLATE, STAGE1_TEMPLATE,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SectionTag {
    PreliminaryVisualAnalysis,
    RagReferenceInformationAnalysis,
    FusionReasoningAndDecision,
    Answer,
}

impl SectionTag {
    pub const ALL: [SectionTag; 4] = [
        SectionTag::PreliminaryVisualAnalysis,
        SectionTag::RagReferenceInformationAnalysis,
        SectionTag::FusionReasoningAndDecision,
        SectionTag::Answer,
    ];

    /// The literal tag name as it appears between angle brackets.
    pub fn name(self) -> &'static str {
        match self {
            SectionTag::PreliminaryVisualAnalysis => "Preliminary Visual Analysis",
            SectionTag::RagReferenceInformationAnalysis => "RAG Reference Information Analysis",
            SectionTag::FusionReasoningAndDecision => "Fusion, Reasoning, and Decision",
            SectionTag::Answer => "Answer",
        }
    }

    pub fn rank(self) -> usize {
        self as usize
    }
}

impl fmt::Display for SectionTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ParseMode {
    #[default]
    Strict,
    Lenient,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Violation {
    MissingSection(SectionTag),
    DuplicateSection(SectionTag),
    OutOfOrder(SectionTag),
    UnmatchedTag(SectionTag),
    BadAnswerToken(String),
}

impl Violation {
    /// Short stable code, e.g. `MissingSection(Answer)`.
    pub fn code(&self) -> String {
        match self {
            Violation::MissingSection(t) => format!("MissingSection({t})"),
            Violation::DuplicateSection(t) => format!("DuplicateSection({t})"),
            Violation::OutOfOrder(t) => format!("OutOfOrder({t})"),
            Violation::UnmatchedTag(t) => format!("UnmatchedTag({t})"),
            Violation::BadAnswerToken(_) => "BadAnswerToken".to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SampleKind {
    CrossVerification,
    EvidenceGuidedCorrection,
    ResilientRejection,
}

impl SampleKind {
    pub const ALL: [SampleKind; 3] =
        [SampleKind::CrossVerification, SampleKind::EvidenceGuidedCorrection, SampleKind::ResilientRejection];

    pub fn template_id(self) -> &'static str {
        match self {
            SampleKind::CrossVerification => "cot_cross_verification",
            SampleKind::EvidenceGuidedCorrection => "cot_evidence_guided_correction",
            SampleKind::ResilientRejection => "cot_resilient_rejection",
        }
    }
}

impl fmt::Display for SampleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FCotResponse {
    pub preliminary: String,
    pub rag_analysis: String,
    pub fusion: String,
    pub answer: Option<Label>,
    pub s1_pred: Option<Label>,
    pub format_valid: bool,
    pub violations: Vec<Violation>,
}

impl FCotResponse {
    /// Builds a valid response from its parts.
    pub fn new(
        preliminary: impl Into<String>,
        rag_analysis: impl Into<String>,
        fusion: impl Into<String>,
        answer: Label,
        s1_pred: Option<Label>,
    ) -> Self {
        FCotResponse {
            preliminary: preliminary.into(),
            rag_analysis: rag_analysis.into(),
            fusion: fusion.into(),
            answer: Some(answer),
            s1_pred,
            format_valid: true,
            violations: Vec::new(),
        }
    }

    pub fn violation_codes(&self) -> Vec<String> {
        self.violations.iter().map(Violation::code).collect()
    }
}

/// One line of a parsed-response dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseSummary {
    pub sample_id: String,
    pub format_valid: bool,
    pub violations: Vec<String>,
    pub s1_pred: Option<Label>,
    pub answer: Option<Label>,
}

impl ResponseSummary {
    pub fn new(sample_id: impl Into<String>, response: &FCotResponse) -> Self {
        ResponseSummary {
            sample_id: sample_id.into(),
            format_valid: response.format_valid,
            violations: response.violation_codes(),
            s1_pred: response.s1_pred,
            answer: response.answer,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum FcotError {
    #[error("cannot serialize response: {0}")]
    InvalidResponse(String),
    #[error("missing slot {0}")]
    MissingSlot(String),
    #[error("unknown slot {0}")]
    UnknownSlot(String),
    #[error("unknown template {0}")]
    UnknownTemplate(String),
    #[error("template {id}: {reason}")]
    MalformedTemplate { id: String, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}
