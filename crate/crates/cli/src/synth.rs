//! Seeded synthetic corpus: a knowledge base in the adapter file format,
//! labelled query frames, an inventory, annotation jobs and a matching
//! configuration file.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vrag_core::fkd::{
    ingest, parse_annotation, AnnotationMode, EmbeddingRecord, KnowledgeEntry, Label, ManipulationMethod, MediaRef,
};
use vrag_core::jsonl;

use crate::config::PipelineConfig;
use crate::records::{AnnotationJob, FrameRecord, InventoryRecord};
use crate::CliError;

pub const SOURCE_DIR: &str = "fkd";
pub const FRAMES_FILE: &str = "frames.jsonl";
pub const INVENTORY_FILE: &str = "inventory.jsonl";
pub const JOBS_FILE: &str = "annotation_jobs.jsonl";
pub const CONFIG_FILE: &str = "vrag.toml";

const METHODS: [ManipulationMethod; 5] = [
    ManipulationMethod::Real,
    ManipulationMethod::DeepFakes,
    ManipulationMethod::Face2Face,
    ManipulationMethod::FaceSwap,
    ManipulationMethod::NeuralTextures,
];

const FAKE_NOTES: &[&str] = &[
    "[Mouth]: Blurred lip boundary with smeared teeth.",
    "[Skin]: Central area cool white, periphery yellowish, clear blending boundary.",
    "[Eyes]: Iris texture lost and eyelids misaligned.",
    "[Facial Contour]: Visible splicing line along the jaw.",
];

const REAL_NOTES: &[&str] = &[
    "[Skin Texture Details]: Pores and fine wrinkles are consistent with the neck.",
    "[Lighting Consistency]: Lighting direction on the face and neck is consistent.",
    "[Lip Shape]: Lip shape is natural and the shadow under the lower lip is natural.",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    pub dimension: usize,
    /// Knowledge-base videos per manipulation method (real included).
    pub corpus_videos_per_method: usize,
    pub corpus_frames_per_video: usize,
    /// Query videos per class.
    pub query_videos_per_class: usize,
    pub query_frames_per_video: usize,
    /// Uniform noise half-width added to every component.
    pub noise: f32,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            seed: 7,
            dimension: 16,
            corpus_videos_per_method: 6,
            corpus_frames_per_video: 4,
            query_videos_per_class: 12,
            query_frames_per_video: 3,
            noise: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub entries: usize,
    pub frames: usize,
    pub query_videos: usize,
    pub config_path: PathBuf,
}

/// Class centre plus a smaller per-method offset, so classes are far apart
/// and methods form sub-clusters.
fn embed(rng: &mut ChaCha8Rng, spec: &SynthSpec, method: ManipulationMethod) -> Vec<f32> {
    let d = spec.dimension;
    let class_axis = if method.label() == Label::Real { 0 } else { 1 };
    let method_axis = 2 + METHODS.iter().position(|m| *m == method).unwrap_or(0) % (d - 2);
    (0..d)
        .map(|i| {
            let mut x = rng.gen_range(-spec.noise..spec.noise);
            if i == class_axis {
                x += 1.0;
            }
            if i == method_axis {
                x += 0.3;
            }
            x
        })
        .collect()
}

fn note(rng: &mut ChaCha8Rng, label: Label) -> String {
    let (head, pool) = match label {
        Label::Real => ("Indicators of Authenticity:", REAL_NOTES),
        Label::Fake => ("Forgery Artifacts:", FAKE_NOTES),
    };
    let a = rng.gen_range(0..pool.len());
    let b = (a + 1 + rng.gen_range(0..pool.len() - 1)) % pool.len();
    let (a, b) = (a.min(b), a.max(b));
    format!("{head} {} {}", pool[a], pool[b])
}

fn short(method: ManipulationMethod) -> &'static str {
    match method {
        ManipulationMethod::Real => "real",
        ManipulationMethod::DeepFakes => "df",
        ManipulationMethod::Face2Face => "f2f",
        ManipulationMethod::FaceSwap => "fs",
        ManipulationMethod::NeuralTextures => "nt",
        ManipulationMethod::Other => "other",
    }
}

/// Writes the synthetic fixture under `dir` and returns what was written.
pub fn generate(spec: &SynthSpec, dir: &Path) -> Result<SynthSummary, CliError> {
    if spec.dimension < 3 {
        return Err(CliError::Validation("synthetic dimension must be at least 3".into()));
    }
    if spec.query_videos_per_class == 0 || spec.query_frames_per_video == 0 || spec.corpus_videos_per_method == 0 {
        return Err(CliError::Validation("synthetic counts must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut entries = Vec::new();
    let mut vectors = Vec::new();
    for method in METHODS {
        for v in 0..spec.corpus_videos_per_method {
            for f in 0..spec.corpus_frames_per_video {
                let media_ref = MediaRef::new("synthetic", format!("kb_{}_{v:03}", short(method)), format!("{f:04}"));
                let entry_id = media_ref.entry_id(method);
                let raw = note(&mut rng, method.label());
                let findings = parse_annotation(&raw, AnnotationMode::Strict)?;
                vectors.push(EmbeddingRecord::new(entry_id.clone(), embed(&mut rng, spec, method)));
                entries.push(KnowledgeEntry {
                    embedding_id: entry_id.clone(),
                    entry_id,
                    media_ref,
                    label: method.label(),
                    method,
                    findings,
                    raw_annotation: raw,
                });
            }
        }
    }
    let jobs: Vec<AnnotationJob> = entries
        .iter()
        .step_by(spec.corpus_frames_per_video.max(1) * 2)
        .map(|e| AnnotationJob {
            media_ref: e.media_ref.clone(),
            method: e.method,
            image: format!("synthetic/kb/{}/{}.png", e.media_ref.video_id, e.media_ref.frame_id),
            original_image: (e.label == Label::Fake)
                .then(|| format!("synthetic/kb/source_{}/{}.png", e.media_ref.video_id, e.media_ref.frame_id)),
            embedding_id: e.embedding_id.clone(),
        })
        .collect();
    let entry_count = entries.len();
    ingest(entries, vectors, &dir.join(SOURCE_DIR))?;

    let mut frames = Vec::new();
    let mut inventory = Vec::new();
    for label in Label::ALL {
        for v in 0..spec.query_videos_per_class {
            let method = match label {
                Label::Real => ManipulationMethod::Real,
                Label::Fake => ManipulationMethod::FORGERIES[v % ManipulationMethod::FORGERIES.len()],
            };
            let video_id = format!("q_{}_{v:03}", short(method));
            for f in 0..spec.query_frames_per_video {
                let frame_id = format!("{f:04}");
                frames.push(FrameRecord {
                    sample_id: format!("{video_id}/{frame_id}"),
                    image_ref: format!("synthetic/query/{video_id}/{frame_id}.png"),
                    video_id: video_id.clone(),
                    frame_id,
                    label: Some(label),
                    vector: Some(embed(&mut rng, spec, method)),
                    vector_ref: None,
                    self_id: None,
                });
            }
            inventory.push(InventoryRecord { video_id, label, frames: spec.query_frames_per_video * 10 });
        }
    }
    jsonl::write(&dir.join(FRAMES_FILE), &frames)?;
    jsonl::write(&dir.join(INVENTORY_FILE), &inventory)?;
    jsonl::write(&dir.join(JOBS_FILE), &jobs)?;

    let videos = inventory.len();
    let mut config = PipelineConfig { seed: Some(spec.seed), ..PipelineConfig::default() };
    config.corpus.source_dir = Some(SOURCE_DIR.into());
    config.corpus.frames = Some(FRAMES_FILE.into());
    config.corpus.inventory = Some(INVENTORY_FILE.into());
    config.corpus.annotation_jobs = Some(JOBS_FILE.into());
    config.corpus.dataset_name = "Synthetic".into();
    config.dataset.stage1_count = videos / 3;
    config.dataset.real_frames = spec.query_videos_per_class * spec.query_frames_per_video * 2;
    config.dataset.fake_frames = config.dataset.real_frames;
    config.evaluation.judge_models = vec!["judge-a".into(), "judge-b".into()];
    let config_path = dir.join(CONFIG_FILE);
    std::fs::write(&config_path, config.to_toml())?;

    Ok(SynthSummary { entries: entry_count, frames: frames.len(), query_videos: videos, config_path })
}

#[cfg(test)]
mod tests {
    use super::*;
    use vrag_core::fkd::load_corpus;

    fn cosine(a: &[f32], b: &[f32]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum();
        let n = |v: &[f32]| v.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
        dot / (n(a) * n(b))
    }

    #[test]
    fn fixture_loads_and_separates_classes() {
        let dir = tempfile::tempdir().unwrap();
        let summary = generate(&SynthSpec::default(), dir.path()).unwrap();
        let corpus = load_corpus(&dir.path().join(SOURCE_DIR)).unwrap();
        assert_eq!(corpus.entries.len(), summary.entries);

        let (mut within, mut cross) = (Vec::new(), Vec::new());
        for i in 0..corpus.entries.len() {
            for j in i + 1..corpus.entries.len() {
                let c = cosine(corpus.vectors.row(i), corpus.vectors.row(j));
                if corpus.entries[i].label == corpus.entries[j].label {
                    within.push(c);
                } else {
                    cross.push(c);
                }
            }
        }
        let min_within = within.iter().cloned().fold(f64::INFINITY, f64::min);
        let max_cross = cross.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(min_within > max_cross, "{min_within} vs {max_cross}");

        let cfg = PipelineConfig::load(&summary.config_path).unwrap();
        assert!(cfg.corpus.frames.unwrap().exists());
        assert_eq!(cfg.seed, Some(7));
    }

    #[test]
    fn deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate(&SynthSpec::default(), a.path()).unwrap();
        generate(&SynthSpec::default(), b.path()).unwrap();
        for f in ["fkd/vectors.bin", "fkd/entries.jsonl", FRAMES_FILE] {
            assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
        }
    }
}
