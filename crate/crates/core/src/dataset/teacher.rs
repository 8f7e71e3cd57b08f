use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{gold_s1, DatasetError, SampleRecord};
use crate::fcot::{format_evidence_block, parse_fcot, serialize_fcot, FCotResponse, ParseMode, TemplateSet};
use crate::gateway::{ChatRequest, DecodingParams, Gateway, ImageRef};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherConfig {
    pub model_id: String,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Total attempts per sample, including the first.
    pub max_attempts: u32,
    pub parallelism: usize,
    pub seed: u64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            model_id: "teacher".into(),
            temperature: 0.7,
            max_tokens: 2048,
            max_attempts: 3,
            parallelism: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TeacherStats {
    pub samples: usize,
    pub succeeded: usize,
    pub failed: usize,
    pub total_attempts: usize,
    pub attempts_histogram: BTreeMap<u32, usize>,
}

/// The request sent on a given attempt (1-based). Each attempt carries its
/// own seed so retries are distinct requests.
pub fn teacher_request(
    record: &SampleRecord,
    templates: &TemplateSet,
    config: &TeacherConfig,
    attempt: u32,
) -> Result<ChatRequest, DatasetError> {
    let slots = BTreeMap::from([
        ("image_ref".to_string(), record.image_ref.clone()),
        ("evidence_block".to_string(), format_evidence_block(&record.bundle).text),
        ("ground_truth".to_string(), record.ground_truth.to_string()),
    ]);
    let prompt = templates.render(&record.teacher_template_id, &slots)?;
    let params = DecodingParams {
        temperature: config.temperature,
        max_tokens: config.max_tokens,
        want_logprobs: false,
        seed: Some(config.seed.wrapping_add(u64::from(attempt))),
    };
    Ok(ChatRequest::from_prompt(&config.model_id, prompt, Some(ImageRef::new(&record.image_ref)), params))
}

/// Rewrites an accepted teacher reply in canonical form, with the
/// preliminary judgment implied by the sample kind.
fn canonical_gold(record: &SampleRecord, parsed: FCotResponse) -> Result<String, String> {
    let s1 = gold_s1(record.kind, record.ground_truth);
    if parsed.s1_pred.is_some_and(|p| p != s1) {
        log::debug!("{}: teacher preliminary reads {:?}, expected {s1}", record.sample_id, parsed.s1_pred);
    }
    let gold = FCotResponse::new(parsed.preliminary, parsed.rag_analysis, parsed.fusion, record.ground_truth, Some(s1));
    serialize_fcot(&gold).map_err(|e| e.to_string())
}

/// Asks the teacher for a gold response, retrying on malformed output or a
/// wrong answer.
pub fn build_fcot_sample(
    mut record: SampleRecord,
    gateway: &Gateway,
    templates: &TemplateSet,
    config: &TeacherConfig,
) -> Result<SampleRecord, DatasetError> {
    let mut last = String::from("no attempts made");
    for attempt in 1..=config.max_attempts {
        let request = teacher_request(&record, templates, config, attempt)?;
        let reply = gateway.complete(&request)?;
        let parsed = parse_fcot(&reply.text, ParseMode::Lenient);
        if !parsed.format_valid {
            last = format!("malformed: {}", parsed.violation_codes().join(", "));
        } else if parsed.answer != Some(record.ground_truth) {
            last = format!("answer {:?} differs from ground truth {}", parsed.answer, record.ground_truth);
        } else {
            match canonical_gold(&record, parsed) {
                Ok(gold) => {
                    record.gold_fcot = Some(gold);
                    record.teacher_attempts = attempt;
                    return Ok(record);
                }
                Err(e) => last = e,
            }
        }
        log::debug!("{}: teacher attempt {attempt} rejected ({last})", record.sample_id);
    }
    Err(DatasetError::TeacherFormatFailure { sample_id: record.sample_id, attempts: config.max_attempts, last })
}

/// Runs [`build_fcot_sample`] over many records with `config.parallelism`
/// workers. Results keep input order.
pub fn build_fcot_samples(
    records: Vec<SampleRecord>,
    gateway: &Gateway,
    templates: &TemplateSet,
    config: &TeacherConfig,
) -> (Vec<Result<SampleRecord, DatasetError>>, TeacherStats) {
    let n = records.len();
    let inputs: Vec<Mutex<Option<SampleRecord>>> = records.into_iter().map(|r| Mutex::new(Some(r))).collect();
    let outputs: Vec<Mutex<Option<Result<SampleRecord, DatasetError>>>> = (0..n).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..config.parallelism.max(1).min(n) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let record = inputs[i].lock().unwrap().take().expect("each record is taken once");
                let result = build_fcot_sample(record, gateway, templates, config);
                *outputs[i].lock().unwrap() = Some(result);
            });
        }
    });

    let results: Vec<_> = outputs.into_iter().map(|m| m.into_inner().unwrap().unwrap()).collect();
    let mut stats = TeacherStats { samples: n, ..TeacherStats::default() };
    for r in &results {
        let attempts = match r {
            Ok(rec) => {
                stats.succeeded += 1;
                rec.teacher_attempts
            }
            Err(DatasetError::TeacherFormatFailure { attempts, .. }) => {
                stats.failed += 1;
                *attempts
            }
            Err(_) => {
                stats.failed += 1;
                continue;
            }
        };
        stats.total_attempts += attempts as usize;
        *stats.attempts_histogram.entry(attempts).or_default() += 1;
    }
    (results, stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::tests::bundle;
    use crate::dataset::InferenceMode;
    use crate::fcot::SampleKind;
    use crate::fkd::Label;
    use crate::gateway::{GatewayConfig, MockReply, MockResponder, RetryPolicy};
    use std::sync::Arc;

    fn record(truth: Label, s1: Label, majority: Label) -> SampleRecord {
        SampleRecord::new("s1", "v1", "frames/v1/0.png", truth, Some(s1), InferenceMode::WithoutRag, bundle(majority))
    }

    fn gateway(mock: MockResponder) -> Gateway {
        let cfg = GatewayConfig {
            retry: RetryPolicy { max_attempts: 1, ..RetryPolicy::default() },
            ..GatewayConfig::default()
        };
        Gateway::new(cfg, Arc::new(mock)).unwrap()
    }

    fn reply(answer: Label) -> String {
        serialize_fcot(&FCotResponse::new("the skin looks smooth", "refs", "checked", answer, None)).unwrap()
    }

    #[test]
    fn gold_from_fixture() {
        let rec = record(Label::Fake, Label::Fake, Label::Fake);
        assert_eq!(rec.kind, SampleKind::CrossVerification);
        let templates = TemplateSet::builtin();
        let cfg = TeacherConfig::default();
        let fp = teacher_request(&rec, &templates, &cfg, 1).unwrap().fingerprint();
        let gw = gateway(MockResponder::scripted(BTreeMap::from([(fp, MockReply::Text(reply(Label::Fake)))]), true));
        let out = build_fcot_sample(rec, &gw, &templates, &cfg).unwrap();
        assert_eq!(out.teacher_attempts, 1);
        out.validate().unwrap();
        let gold = parse_fcot(out.gold_fcot.as_ref().unwrap(), ParseMode::Strict);
        assert_eq!(gold.answer, Some(Label::Fake));
        assert_eq!(gold.s1_pred, Some(Label::Fake));
    }

    #[test]
    fn wrong_answers_then_success() {
        let rec = record(Label::Real, Label::Fake, Label::Real);
        assert_eq!(rec.kind, SampleKind::EvidenceGuidedCorrection);
        let templates = TemplateSet::builtin();
        let cfg = TeacherConfig::default();
        let fp = |a| teacher_request(&rec, &templates, &cfg, a).unwrap().fingerprint();
        let script = BTreeMap::from([
            (fp(1), MockReply::Text(reply(Label::Fake))),
            (fp(2), MockReply::Text(reply(Label::Fake))),
            (fp(3), MockReply::Text(reply(Label::Real))),
        ]);
        let out =
            build_fcot_sample(rec.clone(), &gateway(MockResponder::scripted(script, true)), &templates, &cfg).unwrap();
        assert_eq!(out.teacher_attempts, 3);
        let gold = parse_fcot(out.gold_fcot.as_ref().unwrap(), ParseMode::Strict);
        assert_eq!(gold.s1_pred, Some(Label::Fake));
    }

    #[test]
    fn always_malformed_fails() {
        let rec = record(Label::Real, Label::Real, Label::Real);
        let templates = TemplateSet::builtin();
        let cfg = TeacherConfig::default();
        let script = (1..=3)
            .map(|a| {
                (teacher_request(&rec, &templates, &cfg, a).unwrap().fingerprint(), MockReply::Text("Real".into()))
            })
            .collect();
        let err =
            build_fcot_sample(rec, &gateway(MockResponder::scripted(script, true)), &templates, &cfg).unwrap_err();
        assert!(matches!(err, DatasetError::TeacherFormatFailure { attempts: 3, .. }));
    }

    #[test]
    fn batch_with_rule_mock() {
        let templates = TemplateSet::builtin();
        let records: Vec<SampleRecord> = (0..12)
            .map(|i| {
                let truth = if i % 2 == 0 { Label::Real } else { Label::Fake };
                let s1 = if i % 3 == 0 { truth.flipped() } else { truth };
                let maj = if i % 4 == 0 { truth.flipped() } else { truth };
                let mut r = record(truth, s1, maj);
                r.sample_id = format!("s{i}");
                r
            })
            .collect();
        let gw = gateway(MockResponder::rules(11).with_format_noise(0.3));
        let (results, stats) = build_fcot_samples(records, &gw, &templates, &TeacherConfig::default());
        assert_eq!(results.len(), 12);
        for (i, r) in results.iter().enumerate() {
            if let Ok(rec) = r {
                assert_eq!(rec.sample_id, format!("s{i}"));
                rec.validate().unwrap();
            }
        }
        assert_eq!(stats.succeeded + stats.failed, 12);
        assert!(stats.total_attempts > 12, "noise should force some retries");
    }
}
