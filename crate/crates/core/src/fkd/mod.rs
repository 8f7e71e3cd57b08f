//! Forensic knowledge database: record types, annotation parsing, sampling
//! plans and on-disk persistence.

mod annotation;
mod sampling;
mod storage;
pub mod vector_file;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use annotation::{parse_annotation, render_findings, AnnotationMode};
pub use sampling::{build_sampling_plan, SamplingPlan, VideoInventory};
pub use storage::{
    ingest, load_corpus, Corpus, CorpusManifest, VectorMatrix, ENTRIES_FILE, MANIFEST_FILE, MANIFEST_VERSION,
    VECTORS_FILE,
};

/// Binary authenticity label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Real, Label::Fake];

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Real => "Real",
            Label::Fake => "Fake",
        }
    }

    pub fn flipped(self) -> Label {
        match self {
            Label::Real => Label::Fake,
            Label::Fake => Label::Real,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = FkdError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "real" => Ok(Label::Real),
            "fake" => Ok(Label::Fake),
            _ => Err(FkdError::InvalidEntry(format!("unknown label {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ManipulationMethod {
    Real,
    DeepFakes,
    Face2Face,
    FaceSwap,
    NeuralTextures,
    Other,
}

impl ManipulationMethod {
    pub const FORGERIES: [ManipulationMethod; 4] = [
        ManipulationMethod::DeepFakes,
        ManipulationMethod::Face2Face,
        ManipulationMethod::FaceSwap,
        ManipulationMethod::NeuralTextures,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ManipulationMethod::Real => "Real",
            ManipulationMethod::DeepFakes => "DeepFakes",
            ManipulationMethod::Face2Face => "Face2Face",
            ManipulationMethod::FaceSwap => "FaceSwap",
            ManipulationMethod::NeuralTextures => "NeuralTextures",
            ManipulationMethod::Other => "Other",
        }
    }

    /// The label implied by this method.
    pub fn label(self) -> Label {
        match self {
            ManipulationMethod::Real => Label::Real,
            _ => Label::Fake,
        }
    }
}

impl fmt::Display for ManipulationMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ManipulationMethod {
    type Err = FkdError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let m = match s.trim().to_ascii_lowercase().as_str() {
            "real" | "original" => ManipulationMethod::Real,
            "deepfakes" => ManipulationMethod::DeepFakes,
            "face2face" => ManipulationMethod::Face2Face,
            "faceswap" => ManipulationMethod::FaceSwap,
            "neuraltextures" => ManipulationMethod::NeuralTextures,
            "other" => ManipulationMethod::Other,
            _ => return Err(FkdError::InvalidEntry(format!("unknown method {s:?}"))),
        };
        Ok(m)
    }
}

/// One `[region]: description` clause of an annotation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionFinding {
    pub region: String,
    pub description: String,
}

impl RegionFinding {
    /// Region name lower-cased with internal whitespace collapsed. Used for
    /// comparisons only; the stored region is kept verbatim.
    pub fn normalized_region(&self) -> String {
        self.region.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
    }
}

/// Where a knowledge entry's frame came from.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MediaRef {
    pub dataset: String,
    pub video_id: String,
    pub frame_id: String,
}

impl MediaRef {
    pub fn new(dataset: impl Into<String>, video_id: impl Into<String>, frame_id: impl Into<String>) -> Self {
        MediaRef { dataset: dataset.into(), video_id: video_id.into(), frame_id: frame_id.into() }
    }

    /// Stable identifier `<dataset>/<method>/<video>/<frame>`.
    pub fn entry_id(&self, method: ManipulationMethod) -> String {
        format!("{}/{}/{}/{}", self.dataset, method, self.video_id, self.frame_id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeEntry {
    pub entry_id: String,
    pub media_ref: MediaRef,
    pub label: Label,
    pub method: ManipulationMethod,
    #[serde(default)]
    pub findings: Vec<RegionFinding>,
    pub raw_annotation: String,
    pub embedding_id: String,
}

impl KnowledgeEntry {
    pub fn validate(&self) -> Result<(), FkdError> {
        let bad = |why: &str| Err(FkdError::InvalidEntry(format!("{}: {why}", self.entry_id)));
        if self.entry_id.trim().is_empty() {
            return Err(FkdError::InvalidEntry("empty entry_id".into()));
        }
        if self.embedding_id.trim().is_empty() {
            return bad("empty embedding_id");
        }
        if self.method.label() != self.label {
            return bad("label and manipulation method disagree");
        }
        if self.label == Label::Fake && self.findings.is_empty() {
            return bad("fake entries need at least one region finding");
        }
        for f in &self.findings {
            if f.region.trim().is_empty() || f.description.trim().is_empty() {
                return bad("empty region or description");
            }
            if f.region.contains(['[', ']']) {
                return bad("region contains a square bracket");
            }
        }
        Ok(())
    }

    /// Single-line evidence text shown to the reasoning model.
    pub fn evidence_text(&self) -> String {
        let text = if self.findings.is_empty() { self.raw_annotation.clone() } else { render_findings(&self.findings) };
        text.split_whitespace().collect::<Vec<_>>().join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub embedding_id: String,
    pub vector: Vec<f32>,
    pub l2_norm: f64,
}

impl EmbeddingRecord {
    /// Builds a record with its norm computed from the vector.
    pub fn new(embedding_id: impl Into<String>, vector: Vec<f32>) -> Self {
        let l2_norm = l2_norm(&vector);
        EmbeddingRecord { embedding_id: embedding_id.into(), vector, l2_norm }
    }

    pub fn validate(&self) -> Result<(), FkdError> {
        if self.vector.iter().any(|x| !x.is_finite()) {
            return Err(FkdError::NonFinite(self.embedding_id.clone()));
        }
        let norm = l2_norm(&self.vector);
        let tol = 1e-6 * norm.max(f64::MIN_POSITIVE);
        if self.l2_norm.is_nan() || self.l2_norm < 0.0 || (self.l2_norm - norm).abs() > tol.max(1e-12) {
            return Err(FkdError::NormMismatch {
                embedding_id: self.embedding_id.clone(),
                stored: self.l2_norm,
                computed: norm,
            });
        }
        Ok(())
    }
}

pub fn l2_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
}

#[derive(Debug, thiserror::Error)]
pub enum FkdError {
    #[error("annotation is empty")]
    EmptyAnnotation,
    #[error("malformed clause at byte {offset}: {reason}")]
    MalformedClause { offset: usize, reason: String },
    #[error("dimension mismatch for {id}: expected {expected}, got {actual}")]
    DimensionMismatch { id: String, expected: usize, actual: usize },
    #[error("duplicate id {0}")]
    DuplicateId(String),
    #[error("entry {entry_id} references missing embedding {embedding_id}")]
    DanglingEmbeddingRef { entry_id: String, embedding_id: String },
    #[error("embedding {0} has non-finite components")]
    NonFinite(String),
    #[error("embedding {embedding_id}: stored norm {stored} does not match computed {computed}")]
    NormMismatch { embedding_id: String, stored: f64, computed: f64 },
    #[error("invalid entry: {0}")]
    InvalidEntry(String),
    #[error("checksum mismatch: manifest says {expected}, vector file hashes to {actual}")]
    ChecksumMismatch { expected: String, actual: String },
    #[error("unsupported format version {0}")]
    VersionUnsupported(u32),
    #[error("corrupt vector file: {0}")]
    CorruptVectorFile(String),
    #[error("manifest disagrees with corpus contents: {0}")]
    ManifestMismatch(String),
    #[error("{path}:{line}: {source}")]
    Record {
        path: String,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
