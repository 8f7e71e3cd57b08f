//! Evaluation metrics: answer scores, video-level AUC, robustness rate under
//! misleading evidence, cost shares and judge-based explanation scoring.

mod auc;
mod cost;
mod judge;
mod report;
mod robustness;
mod score;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use auc::{auc_pairwise, auc_rank, video_level_auc, video_scores, Aggregation, AucRatio, FrameScore, VideoScore};
pub use cost::{cost_ratio, CostProfile};
pub use judge::{
    cross_judge_average, judge_explanations, mean_total, parse_judge_output, JudgeConfig, JudgeRun, JudgeSample,
    JudgeScore,
};
pub use report::{render_auc_table, render_cost_table, render_judge_table, render_robustness_table};
pub use robustness::{robustness_rate, weighted_robustness, RobustnessRecord, RobustnessResult};
pub use score::answer_to_score;

/// `numerator / denominator` in hundredths, rounded half to even.
pub fn ratio_hundredths(numerator: u128, denominator: u128) -> u128 {
    assert!(denominator > 0, "zero denominator");
    let q = numerator / denominator;
    let r = numerator % denominator;
    match (2 * r).cmp(&denominator) {
        std::cmp::Ordering::Less => q,
        std::cmp::Ordering::Greater => q + 1,
        std::cmp::Ordering::Equal => q + (q & 1),
    }
}

/// A non-negative value with exactly two decimals, held as hundredths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct Decimal2 {
    pub hundredths: u64,
}

impl Decimal2 {
    pub fn from_hundredths(hundredths: u64) -> Self {
        Decimal2 { hundredths }
    }

    /// `100 * numerator / denominator` as a percentage with two decimals.
    pub fn percent(numerator: u64, denominator: u64) -> Self {
        let h = ratio_hundredths(u128::from(numerator) * 10_000, u128::from(denominator));
        Decimal2 { hundredths: h as u64 }
    }

    pub fn as_f64(self) -> f64 {
        self.hundredths as f64 / 100.0
    }
}

impl fmt::Display for Decimal2 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:02}", self.hundredths / 100, self.hundredths % 100)
    }
}

impl FromStr for Decimal2 {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let (int, frac) = s.split_once('.').unwrap_or((s, ""));
        let bad = || format!("{s:?} is not a decimal with at most two places");
        if int.is_empty() || frac.len() > 2 || !int.bytes().chain(frac.bytes()).all(|b| b.is_ascii_digit()) {
            return Err(bad());
        }
        let int: u64 = int.parse().map_err(|_| bad())?;
        let frac: u64 = format!("{frac:0<2}").parse().map_err(|_| bad())?;
        Ok(Decimal2 { hundredths: int * 100 + frac })
    }
}

impl From<Decimal2> for String {
    fn from(d: Decimal2) -> String {
        d.to_string()
    }
}

impl TryFrom<String> for Decimal2 {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("scores cover only one class")]
    SingleClass,
    #[error("no frame scores")]
    Empty,
    #[error("frame {video_id}/{frame_id} has score {score}, outside [0, 1]")]
    InvalidScore { video_id: String, frame_id: String, score: f64 },
    #[error("video {0} has frames with different labels")]
    MixedVideoLabel(String),
    #[error("no adversarial samples")]
    NoAdversarialSamples,
    #[error("cost profile total is zero")]
    ZeroTotal,
    #[error("cost profile has no components")]
    NoComponents,
    #[error("cost component {0} is negative or not finite")]
    BadCost(String),
    #[error("judge output for {sample_id} unusable after {attempts} attempts: {reason}")]
    JudgeFormatFailure { sample_id: String, attempts: u32, reason: String },
    #[error(transparent)]
    Gateway(#[from] crate::gateway::GatewayError),
    #[error(transparent)]
    Template(#[from] crate::fcot::FcotError),
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_even() {
        assert_eq!(ratio_hundredths(7665, 1000), 8);
        assert_eq!(ratio_hundredths(15, 2), 8);
        assert_eq!(ratio_hundredths(13, 2), 6);
        assert_eq!(ratio_hundredths(14, 3), 5);
    }

    #[test]
    fn decimal_text() {
        let d: Decimal2 = "7.5".parse().unwrap();
        assert_eq!(d.hundredths, 750);
        assert_eq!(d.to_string(), "7.50");
        assert_eq!("0.35".parse::<Decimal2>().unwrap().to_string(), "0.35");
        assert!("7.555".parse::<Decimal2>().is_err());
        assert!("-1".parse::<Decimal2>().is_err());
        assert_eq!(Decimal2::percent(32, 34).to_string(), "94.12");
        assert_eq!(serde_json::to_string(&d).unwrap(), "\"7.50\"");
    }
}
