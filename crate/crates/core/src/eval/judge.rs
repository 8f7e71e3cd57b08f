use std::collections::BTreeMap;

use once_cell::sync::Lazy;
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{ratio_hundredths, Decimal2, EvalError};
use crate::fcot::{TemplateSet, JUDGE_TEMPLATE};
use crate::fkd::Label;
use crate::gateway::{ChatRequest, DecodingParams, Gateway, ImageRef};

static SCORE_LINE: Lazy<Regex> = Lazy::new(|| {
    Regex::new(r"(?im)^[ \t*\-]*(accuracy|faithfulness|professionalism)[ \t*]*:[ \t*]*([^\s*]+)").unwrap()
});

const DIMENSIONS: [&str; 3] = ["accuracy", "faithfulness", "professionalism"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeScore {
    pub sample_id: String,
    pub accuracy: u8,
    pub faithfulness: u8,
    pub professionalism: u8,
    pub total: u8,
}

impl JudgeScore {
    pub fn new(sample_id: impl Into<String>, [accuracy, faithfulness, professionalism]: [u8; 3]) -> Self {
        JudgeScore {
            sample_id: sample_id.into(),
            accuracy,
            faithfulness,
            professionalism,
            total: accuracy + faithfulness + professionalism,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeSample {
    pub sample_id: String,
    pub explanation: String,
    pub image_ref: String,
    pub ground_truth: Label,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JudgeConfig {
    pub model_id: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub max_attempts: u32,
    pub parallelism: usize,
    pub seed: u64,
}

impl Default for JudgeConfig {
    fn default() -> Self {
        JudgeConfig {
            model_id: "judge".into(),
            temperature: 0.0,
            max_tokens: 64,
            max_attempts: 3,
            parallelism: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeRun {
    pub judge_model: String,
    pub scores: Vec<JudgeScore>,
    /// Samples whose judge output stayed unusable, with the last reason.
    pub missing: Vec<(String, String)>,
    pub mean_total: Option<Decimal2>,
}

/// Reads `name: digit` lines for the three dimensions, each 0 to 3.
pub fn parse_judge_output(text: &str) -> Result<[u8; 3], String> {
    let mut found: BTreeMap<String, u8> = BTreeMap::new();
    for c in SCORE_LINE.captures_iter(text) {
        let name = c[1].to_ascii_lowercase();
        let raw = c[2].trim_end_matches(['.', ',', ';']);
        let value: u8 = raw
            .split('/')
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| format!("{name}: {raw:?} is not an integer"))?;
        if value > 3 {
            return Err(format!("{name}: {value} is outside 0-3"));
        }
        if found.insert(name.clone(), value).is_some() {
            return Err(format!("{name} scored twice"));
        }
    }
    let mut out = [0u8; 3];
    for (slot, name) in out.iter_mut().zip(DIMENSIONS) {
        *slot = *found.get(name).ok_or_else(|| format!("no {name} score"))?;
    }
    Ok(out)
}

/// Mean total over scored samples, two decimals, half to even.
pub fn mean_total(scores: &[JudgeScore]) -> Option<Decimal2> {
    if scores.is_empty() {
        return None;
    }
    let sum: u128 = scores.iter().map(|s| u128::from(s.total)).sum();
    Some(Decimal2::from_hundredths(ratio_hundredths(sum * 100, scores.len() as u128) as u64))
}

/// Averages per-judge means exactly, rounding half to even.
pub fn cross_judge_average(means: &[Decimal2]) -> Option<Decimal2> {
    if means.is_empty() {
        return None;
    }
    let sum: u128 = means.iter().map(|m| u128::from(m.hundredths)).sum();
    Some(Decimal2::from_hundredths(ratio_hundredths(sum, means.len() as u128) as u64))
}

fn judge_one(
    sample: &JudgeSample,
    gateway: &Gateway,
    templates: &TemplateSet,
    config: &JudgeConfig,
) -> Result<JudgeScore, EvalError> {
    let slots = BTreeMap::from([
        ("image_ref".to_string(), sample.image_ref.clone()),
        ("ground_truth".to_string(), sample.ground_truth.to_string()),
        ("explanation".to_string(), sample.explanation.clone()),
    ]);
    let prompt = templates.render(JUDGE_TEMPLATE, &slots)?;
    let mut reason = String::new();
    for attempt in 1..=config.max_attempts {
        let params = DecodingParams {
            temperature: config.temperature,
            max_tokens: config.max_tokens,
            want_logprobs: false,
            seed: Some(config.seed.wrapping_add(u64::from(attempt))),
        };
        let request =
            ChatRequest::from_prompt(&config.model_id, prompt.clone(), Some(ImageRef::new(&sample.image_ref)), params);
        let reply = gateway.complete(&request)?;
        match parse_judge_output(&reply.text) {
            Ok(dims) => return Ok(JudgeScore::new(&sample.sample_id, dims)),
            Err(e) => reason = e,
        }
    }
    Err(EvalError::JudgeFormatFailure { sample_id: sample.sample_id.clone(), attempts: config.max_attempts, reason })
}

/// Scores every explanation with one judge model. Samples whose output
/// cannot be parsed after the retry budget are listed as missing and left
/// out of the mean.
pub fn judge_explanations(
    gateway: &Gateway,
    samples: &[JudgeSample],
    templates: &TemplateSet,
    config: &JudgeConfig,
) -> Result<JudgeRun, EvalError> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(config.parallelism.max(1)).build().expect("thread pool");
    let results: Vec<Result<JudgeScore, EvalError>> =
        pool.install(|| samples.par_iter().map(|s| judge_one(s, gateway, templates, config)).collect());
    let mut scores = Vec::new();
    let mut missing = Vec::new();
    for r in results {
        match r {
            Ok(s) => scores.push(s),
            Err(EvalError::JudgeFormatFailure { sample_id, reason, .. }) => missing.push((sample_id, reason)),
            Err(e) => return Err(e),
        }
    }
    Ok(JudgeRun { judge_model: config.model_id.clone(), mean_total: mean_total(&scores), scores, missing })
}
