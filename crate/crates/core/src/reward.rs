//! Process-aware reward for group-relative policy optimization: conflict
//! detection, the conflict/format reward pair, batch means and group
//! advantages.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::fcot::{parse_fcot, FCotResponse, ParseMode};
use crate::fkd::Label;
use crate::retrieval::EvidenceBundle;

pub const DEFAULT_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum UnknownS1Policy {
    TreatAsNoConflict,
    TreatAsConflict,
    #[default]
    ZeroConflictReward,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub alpha: f64,
    pub beta: f64,
    pub format_reward_valid: f64,
    pub format_reward_invalid: f64,
    pub unknown_s1_policy: UnknownS1Policy,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            alpha: 1.0,
            beta: 1.0,
            format_reward_valid: 1.0,
            format_reward_invalid: 0.0,
            unknown_s1_policy: UnknownS1Policy::ZeroConflictReward,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), RewardError> {
        let fields = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("format_reward_valid", self.format_reward_valid),
            ("format_reward_invalid", self.format_reward_invalid),
        ];
        match fields.iter().find(|(_, v)| !v.is_finite()) {
            Some((name, _)) => Err(RewardError::NonFinite(name.to_string())),
            None => Ok(()),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RewardError {
    #[error("batch is empty")]
    EmptyBatch,
    #[error("group needs at least 2 rewards, got {0}")]
    GroupTooSmall(usize),
    #[error("{0} is not finite")]
    NonFinite(String),
}

mod bit {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &bool, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(u8::from(*v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
        match u8::deserialize(d)? {
            0 => Ok(false),
            1 => Ok(true),
            n => Err(serde::de::Error::custom(format!("expected 0 or 1, got {n}"))),
        }
    }
}

/// The (A, C) context of one rollout. `A` and `C` are serialized as 0/1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConflictContext {
    pub s1_pred: Option<Label>,
    pub rag_majority: Label,
    pub ground_truth: Label,
    #[serde(rename = "A", with = "bit")]
    pub answer_correct: bool,
    #[serde(rename = "C", with = "bit")]
    pub conflict: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardRecord {
    pub r_conflict: f64,
    pub f_format: f64,
    #[serde(rename = "R_i")]
    pub r_i: f64,
    pub context: ConflictContext,
}

/// One line of the reward dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardDumpRecord {
    pub sample_id: String,
    #[serde(rename = "A", with = "bit")]
    pub answer_correct: bool,
    #[serde(rename = "C", with = "bit")]
    pub conflict: bool,
    pub r_conflict: f64,
    pub f_format: f64,
    #[serde(rename = "R_i")]
    pub r_i: f64,
    pub advantage: Option<f64>,
}

impl RewardDumpRecord {
    pub fn new(sample_id: impl Into<String>, record: &RewardRecord, advantage: Option<f64>) -> Self {
        RewardDumpRecord {
            sample_id: sample_id.into(),
            answer_correct: record.context.answer_correct,
            conflict: record.context.conflict,
            r_conflict: record.r_conflict,
            f_format: record.f_format,
            r_i: record.r_i,
            advantage,
        }
    }
}

/// Whether the preliminary judgment disagrees with the retrieved majority.
/// Under `ZeroConflictReward` an unknown judgment counts as no conflict; the
/// reward itself is zeroed by [`score_rollout`].
pub fn detect_conflict(s1_pred: Option<Label>, rag_majority: Label, policy: UnknownS1Policy) -> bool {
    match s1_pred {
        Some(s1) => s1 != rag_majority,
        None => policy == UnknownS1Policy::TreatAsConflict,
    }
}

pub fn conflict_reward(answer_correct: bool, conflict: bool) -> f64 {
    match (answer_correct, conflict) {
        (true, true) => 2.0,
        (true, false) => 1.0,
        (false, false) => -1.0,
        (false, true) => -2.0,
    }
}

pub fn format_reward(response: &FCotResponse, config: &RewardConfig) -> f64 {
    if response.format_valid {
        config.format_reward_valid
    } else {
        config.format_reward_invalid
    }
}

/// Scores a parsed response. The response should come from a strict parse.
pub fn score_response(
    response: &FCotResponse,
    ground_truth: Label,
    rag_majority: Label,
    config: &RewardConfig,
) -> RewardRecord {
    let answer_correct = response.answer == Some(ground_truth);
    let conflict = detect_conflict(response.s1_pred, rag_majority, config.unknown_s1_policy);
    let r_conflict = if response.s1_pred.is_none() && config.unknown_s1_policy == UnknownS1Policy::ZeroConflictReward {
        0.0
    } else {
        conflict_reward(answer_correct, conflict)
    };
    let f_format = format_reward(response, config);
    RewardRecord {
        r_conflict,
        f_format,
        r_i: config.alpha * r_conflict + config.beta * f_format,
        context: ConflictContext { s1_pred: response.s1_pred, rag_majority, ground_truth, answer_correct, conflict },
    }
}

/// Parses a rollout strictly and scores it against the ground truth and the
/// bundle's majority label.
pub fn score_rollout(text: &str, ground_truth: Label, bundle: &EvidenceBundle, config: &RewardConfig) -> RewardRecord {
    let response = parse_fcot(text, ParseMode::Strict);
    score_response(&response, ground_truth, bundle.majority_label, config)
}

/// Scores many rollouts in parallel; output order follows input order.
pub fn score_rollouts(rollouts: &[(&str, Label, &EvidenceBundle)], config: &RewardConfig) -> Vec<RewardRecord> {
    rollouts.par_iter().map(|(text, truth, bundle)| score_rollout(text, *truth, bundle, config)).collect()
}

/// Pairwise (cascade) summation; the error grows with log n rather than n.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const BLOCK: usize = 16;
    if values.len() <= BLOCK {
        return values.iter().sum();
    }
    let (left, right) = values.split_at(values.len() / 2);
    pairwise_sum(left) + pairwise_sum(right)
}

pub fn batch_reward(records: &[RewardRecord]) -> Result<f64, RewardError> {
    if records.is_empty() {
        return Err(RewardError::EmptyBatch);
    }
    let values: Vec<f64> = records.iter().map(|r| r.r_i).collect();
    Ok(pairwise_sum(&values) / values.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAdvantages {
    pub rewards: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub advantages: Vec<f64>,
}

/// Group-relative advantages `(R_i - mean) / std` with population std.
/// Groups whose std does not exceed `epsilon` get all-zero advantages.
pub fn group_advantages(rewards: &[f64], epsilon: f64) -> Result<GroupAdvantages, RewardError> {
    if rewards.len() < 2 {
        return Err(RewardError::GroupTooSmall(rewards.len()));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(RewardError::NonFinite("reward".into()));
    }
    let n = rewards.len() as f64;
    let mean = pairwise_sum(rewards) / n;
    let squares: Vec<f64> = rewards.iter().map(|r| (r - mean) * (r - mean)).collect();
    let std = (pairwise_sum(&squares) / n).sqrt();
    let advantages =
        if std > epsilon { rewards.iter().map(|r| (r - mean) / std).collect() } else { vec![0.0; rewards.len()] };
    Ok(GroupAdvantages { rewards: rewards.to_vec(), mean, std, advantages })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fcot::{serialize_fcot, FCotResponse};
    use crate::retrieval::{assemble_bundle, EvidenceItem};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn bundle(majority: Label) -> EvidenceBundle {
        let items = (0..5)
            .map(|i| EvidenceItem {
                entry_id: format!("e{i}"),
                label: if i < 3 { majority } else { majority.flipped() },
                similarity: 0.9 - i as f64 * 0.1,
                annotation: "x".into(),
            })
            .collect();
        assemble_bundle("q", items, None).unwrap()
    }

    fn rollout(s1: Option<Label>, answer: Label) -> String {
        serialize_fcot(&FCotResponse::new("look", "refs", "fuse", answer, s1)).unwrap()
    }

    #[test]
    fn truth_table() {
        assert_eq!(conflict_reward(true, true), 2.0);
        assert_eq!(conflict_reward(true, false), 1.0);
        assert_eq!(conflict_reward(false, true), -2.0);
        assert_eq!(conflict_reward(false, false), -1.0);
    }

    #[test]
    fn conflict_detection() {
        let p = UnknownS1Policy::default();
        assert!(detect_conflict(Some(Label::Fake), Label::Real, p));
        assert!(!detect_conflict(Some(Label::Real), Label::Real, p));
        assert!(detect_conflict(None, Label::Real, UnknownS1Policy::TreatAsConflict));
        assert!(!detect_conflict(None, Label::Real, UnknownS1Policy::TreatAsNoConflict));
    }

    #[test]
    fn conflict_is_xor_of_correctness() {
        for truth in Label::ALL {
            for s1_correct in [true, false] {
                for rag_correct in [true, false] {
                    let s1 = if s1_correct { truth } else { truth.flipped() };
                    let rag = if rag_correct { truth } else { truth.flipped() };
                    let by_labels = detect_conflict(Some(s1), rag, UnknownS1Policy::default());
                    assert_eq!(by_labels, s1_correct ^ rag_correct);
                }
            }
        }
    }

    #[test]
    fn format_reward_scheme() {
        let valid = FCotResponse::new("a", "b", "c", Label::Real, None);
        let mut invalid = valid.clone();
        invalid.format_valid = false;
        let d = RewardConfig::default();
        assert_eq!(format_reward(&valid, &d), 1.0);
        assert_eq!(format_reward(&invalid, &d), 0.0);
        let custom = RewardConfig { format_reward_valid: 2.0, format_reward_invalid: -1.0, ..d };
        assert_eq!(format_reward(&valid, &custom), 2.0);
    }

    #[test]
    fn score_examples() {
        let d = RewardConfig::default();
        let r = score_rollout(&rollout(Some(Label::Fake), Label::Real), Label::Real, &bundle(Label::Real), &d);
        assert_eq!((r.r_conflict, r.f_format, r.r_i), (2.0, 1.0, 3.0));

        let r = score_rollout(
            "I think it is fake.",
            Label::Real,
            &bundle(Label::Real),
            &RewardConfig { unknown_s1_policy: UnknownS1Policy::TreatAsNoConflict, ..d },
        );
        assert!(!r.context.answer_correct && !r.context.conflict);
        assert_eq!(r.r_i, -1.0);

        let cfg = RewardConfig { alpha: 0.5, beta: 2.0, ..d };
        let r = score_rollout(&rollout(Some(Label::Real), Label::Real), Label::Real, &bundle(Label::Real), &cfg);
        assert_eq!(r.r_conflict, 1.0);
        assert_eq!(r.r_i, 2.5);
    }

    #[test]
    fn unknown_s1_zeroes_conflict_reward() {
        let r = score_rollout(&rollout(None, Label::Real), Label::Real, &bundle(Label::Fake), &RewardConfig::default());
        assert_eq!(r.r_conflict, 0.0);
        assert_eq!(r.r_i, 1.0);
    }

    #[test]
    fn batch_examples() {
        let rec = |v: f64| RewardRecord {
            r_conflict: 0.0,
            f_format: 0.0,
            r_i: v,
            context: ConflictContext {
                s1_pred: None,
                rag_majority: Label::Real,
                ground_truth: Label::Real,
                answer_correct: false,
                conflict: false,
            },
        };
        let m = batch_reward(&[rec(3.0), rec(0.0), rec(-1.0)]).unwrap();
        assert_abs_diff_eq!(m, 2.0 / 3.0, epsilon = 1e-15);
        assert_eq!(batch_reward(&vec![rec(1.5); 7]).unwrap(), 1.5);
        assert!(matches!(batch_reward(&[]), Err(RewardError::EmptyBatch)));
    }

    #[test]
    fn advantages_examples() {
        let g = group_advantages(&[2.0, 0.0], DEFAULT_EPSILON).unwrap();
        assert_eq!((g.mean, g.std), (1.0, 1.0));
        assert_eq!(g.advantages, vec![1.0, -1.0]);
        let g = group_advantages(&[1.0, 1.0, 1.0], DEFAULT_EPSILON).unwrap();
        assert_eq!(g.advantages, vec![0.0; 3]);
        assert!(matches!(group_advantages(&[1.0], DEFAULT_EPSILON), Err(RewardError::GroupTooSmall(1))));
    }

    #[test]
    fn dump_serializes_bits() {
        let r = score_rollout(
            &rollout(Some(Label::Fake), Label::Real),
            Label::Real,
            &bundle(Label::Real),
            &RewardConfig::default(),
        );
        let line = serde_json::to_value(RewardDumpRecord::new("s1", &r, Some(0.5))).unwrap();
        assert_eq!(line["A"], 1);
        assert_eq!(line["C"], 1);
        assert_eq!(line["R_i"], 3.0);
    }

    fn neumaier(values: &[f64]) -> f64 {
        let (mut sum, mut comp) = (0.0f64, 0.0f64);
        for &v in values {
            let t = sum + v;
            if sum.abs() >= v.abs() {
                comp += (sum - t) + v;
            } else {
                comp += (v - t) + sum;
            }
            sum = t;
        }
        sum + comp
    }

    fn label() -> impl Strategy<Value = Label> {
        prop_oneof![Just(Label::Real), Just(Label::Fake)]
    }

    proptest! {
        #[test]
        fn monotone(c in any::<bool>(), a in any::<bool>()) {
            prop_assert!(conflict_reward(true, c) > conflict_reward(false, c));
            if a {
                prop_assert!(conflict_reward(a, true) > conflict_reward(a, false));
            } else {
                prop_assert!(conflict_reward(a, true) < conflict_reward(a, false));
            }
        }

        #[test]
        fn linear(alpha in -10.0f64..10.0, beta in -10.0f64..10.0, s1 in label(), ans in label(), truth in label(), maj in label(), valid in any::<bool>()) {
            let cfg = RewardConfig { alpha, beta, ..RewardConfig::default() };
            let mut resp = FCotResponse::new("a", "b", "c", ans, Some(s1));
            if !valid {
                resp.format_valid = false;
            }
            let r = score_response(&resp, truth, maj, &cfg);
            let expected = alpha * conflict_reward(ans == truth, s1 != maj) + beta * if valid { 1.0 } else { 0.0 };
            prop_assert_eq!(r.r_i, expected);
        }

        #[test]
        fn batch_matches_compensated_sum(values in prop::collection::vec(-5.0f64..5.0, 1..1024)) {
            let records: Vec<RewardRecord> = values.iter().map(|&v| RewardRecord {
                r_conflict: 0.0, f_format: 0.0, r_i: v,
                context: ConflictContext { s1_pred: None, rag_majority: Label::Real, ground_truth: Label::Real, answer_correct: false, conflict: false },
            }).collect();
            let oracle = neumaier(&values) / values.len() as f64;
            prop_assert!((batch_reward(&records).unwrap() - oracle).abs() <= 1e-12);
        }

        #[test]
        fn advantages_center_and_invariance(values in prop::collection::vec(-3.0f64..3.0, 2..64), shift in -100.0f64..100.0, scale in 0.01f64..100.0) {
            let g = group_advantages(&values, DEFAULT_EPSILON).unwrap();
            prop_assert!(pairwise_sum(&g.advantages).abs() <= 1e-9);
            prop_assume!(g.std > 1e-3);
            let shifted: Vec<f64> = values.iter().map(|v| v + shift).collect();
            let scaled: Vec<f64> = values.iter().map(|v| v * scale).collect();
            let gs = group_advantages(&shifted, DEFAULT_EPSILON).unwrap();
            let gk = group_advantages(&scaled, DEFAULT_EPSILON).unwrap();
            for i in 0..values.len() {
                prop_assert!((gs.advantages[i] - g.advantages[i]).abs() <= 1e-6);
                prop_assert!((gk.advantages[i] - g.advantages[i]).abs() <= 1e-9);
            }
        }
    }
}
