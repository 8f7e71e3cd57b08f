use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DatasetError, DatasetRecord, SampleRecord};
use crate::fcot::{
    format_evidence_block, parse_fcot, ParseMode, PromptMessage, SampleKind, TemplateSet, INFER_TEMPLATE,
    STAGE1_TEMPLATE,
};
use crate::fkd::Label;
use crate::jsonl;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledFrame {
    pub sample_id: String,
    pub video_id: String,
    pub image_ref: String,
    pub label: Label,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage2Report {
    pub records: usize,
    pub per_kind: BTreeMap<SampleKind, usize>,
}

fn inference_prompt(sample: &SampleRecord, templates: &TemplateSet) -> Result<Vec<PromptMessage>, DatasetError> {
    let slots = BTreeMap::from([
        ("image_ref".to_string(), sample.image_ref.clone()),
        ("evidence_block".to_string(), format_evidence_block(&sample.bundle).text),
    ]);
    Ok(templates.render(INFER_TEMPLATE, &slots)?)
}

/// One VQA record per frame with the fixed Stage-1 question.
pub fn export_stage1_vqa(frames: &[LabeledFrame], templates: &TemplateSet, path: &Path) -> Result<usize, DatasetError> {
    let question = templates.render(STAGE1_TEMPLATE, &BTreeMap::new())?;
    let records: Vec<DatasetRecord> = frames
        .iter()
        .map(|f| DatasetRecord {
            sample_id: f.sample_id.clone(),
            video_id: f.video_id.clone(),
            image_ref: f.image_ref.clone(),
            prompt: question.clone(),
            target: Some(f.label.to_string()),
            label: f.label,
            kind: None,
            bundle: None,
        })
        .collect();
    Ok(jsonl::write(path, records.iter())?)
}

/// Builds the supervised record for a sample with validated gold.
pub fn stage2_record(sample: &SampleRecord, templates: &TemplateSet) -> Result<DatasetRecord, DatasetError> {
    let gold = sample.gold_fcot.as_ref().ok_or_else(|| DatasetError::MissingGold(sample.sample_id.clone()))?;
    let parsed = parse_fcot(gold, ParseMode::Strict);
    if !parsed.format_valid || parsed.answer != Some(sample.ground_truth) {
        return Err(DatasetError::InvalidSample {
            sample_id: sample.sample_id.clone(),
            reason: "gold response does not parse to the ground truth".into(),
        });
    }
    Ok(DatasetRecord {
        sample_id: sample.sample_id.clone(),
        video_id: sample.video_id.clone(),
        image_ref: sample.image_ref.clone(),
        prompt: inference_prompt(sample, templates)?,
        target: Some(gold.clone()),
        label: sample.ground_truth,
        kind: Some(sample.kind),
        bundle: None,
    })
}

/// Writes (inference prompt, gold target) records. Nothing is written if any
/// sample lacks valid gold.
pub fn export_stage2_sft(
    samples: &[SampleRecord],
    templates: &TemplateSet,
    path: &Path,
) -> Result<Stage2Report, DatasetError> {
    let records = samples.iter().map(|s| stage2_record(s, templates)).collect::<Result<Vec<_>, _>>()?;
    let mut per_kind: BTreeMap<SampleKind, usize> = SampleKind::ALL.iter().map(|k| (*k, 0)).collect();
    for s in samples {
        *per_kind.get_mut(&s.kind).unwrap() += 1;
    }
    let records = jsonl::write(path, records.iter())?;
    Ok(Stage2Report { records, per_kind })
}

/// Writes prompt-only records for reinforcement learning. Every sample must
/// come from a video outside `used_videos`.
pub fn export_stage3_prompts(
    samples: &[SampleRecord],
    used_videos: &BTreeSet<String>,
    templates: &TemplateSet,
    path: &Path,
) -> Result<usize, DatasetError> {
    if let Some(leak) = samples.iter().find(|s| used_videos.contains(&s.video_id)) {
        return Err(DatasetError::VideoLeak { sample_id: leak.sample_id.clone(), video_id: leak.video_id.clone() });
    }
    let records = samples
        .iter()
        .map(|s| {
            Ok(DatasetRecord {
                sample_id: s.sample_id.clone(),
                video_id: s.video_id.clone(),
                image_ref: s.image_ref.clone(),
                prompt: inference_prompt(s, templates)?,
                target: None,
                label: s.ground_truth,
                kind: Some(s.kind),
                bundle: Some(s.bundle.clone()),
            })
        })
        .collect::<Result<Vec<_>, DatasetError>>()?;
    Ok(jsonl::write(path, records.iter())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::tests::bundle;
    use crate::dataset::InferenceMode;
    use crate::fcot::{serialize_fcot, FCotResponse};

    fn sample(id: &str, video: &str, truth: Label, s1: Label, majority: Label) -> SampleRecord {
        let mut s = SampleRecord::new(
            id,
            video,
            format!("{video}/0.png"),
            truth,
            Some(s1),
            InferenceMode::WithoutRag,
            bundle(majority),
        );
        let gold = FCotResponse::new("p", "r", "f", truth, Some(super::super::gold_s1(s.kind, truth)));
        s.gold_fcot = Some(serialize_fcot(&gold).unwrap());
        s
    }

    #[test]
    fn stage1_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s1.jsonl");
        let frames = vec![
            LabeledFrame { sample_id: "a".into(), video_id: "v".into(), image_ref: "a.png".into(), label: Label::Real },
            LabeledFrame { sample_id: "b".into(), video_id: "v".into(), image_ref: "b.png".into(), label: Label::Fake },
        ];
        assert_eq!(export_stage1_vqa(&frames, &TemplateSet::builtin(), &path).unwrap(), 2);
        let back: Vec<DatasetRecord> = jsonl::read(&path).unwrap();
        assert_eq!(back[1].target.as_deref(), Some("Fake"));
        assert_eq!(back[0].target.as_deref(), Some("Real"));
        assert_eq!(export_stage1_vqa(&[], &TemplateSet::builtin(), &path).unwrap(), 0);
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "");
    }

    #[test]
    fn stage2_counts_and_targets() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s2.jsonl");
        let samples = vec![
            sample("a", "v1", Label::Fake, Label::Fake, Label::Fake),
            sample("b", "v2", Label::Fake, Label::Real, Label::Fake),
            sample("c", "v3", Label::Real, Label::Fake, Label::Fake),
        ];
        let report = export_stage2_sft(&samples, &TemplateSet::builtin(), &path).unwrap();
        assert_eq!(report.records, 3);
        assert!(report.per_kind.values().all(|&c| c == 1));
        for rec in jsonl::read::<DatasetRecord>(&path).unwrap() {
            let parsed = parse_fcot(rec.target.as_ref().unwrap(), ParseMode::Strict);
            assert!(parsed.format_valid);
            assert_eq!(parsed.answer, Some(rec.label));
            assert!(rec.prompt.iter().any(|m| m.content.contains("1. (\"")));
        }
    }

    #[test]
    fn stage2_missing_gold() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = sample("x", "v", Label::Real, Label::Real, Label::Real);
        s.gold_fcot = None;
        let err = export_stage2_sft(&[s], &TemplateSet::builtin(), &dir.path().join("o.jsonl")).unwrap_err();
        assert!(matches!(err, DatasetError::MissingGold(id) if id == "x"));
    }

    #[test]
    fn stage3_leak_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s3.jsonl");
        let samples = vec![sample("a", "v9", Label::Real, Label::Real, Label::Fake)];
        let used: BTreeSet<String> = ["v1".to_string()].into();
        assert_eq!(export_stage3_prompts(&samples, &used, &TemplateSet::builtin(), &path).unwrap(), 1);
        let rec: Vec<DatasetRecord> = jsonl::read(&path).unwrap();
        assert!(rec[0].target.is_none());
        assert!(rec[0].bundle.is_some());
        let used: BTreeSet<String> = ["v9".to_string()].into();
        assert!(matches!(
            export_stage3_prompts(&samples, &used, &TemplateSet::builtin(), &path),
            Err(DatasetError::VideoLeak { .. })
        ));
    }
}
