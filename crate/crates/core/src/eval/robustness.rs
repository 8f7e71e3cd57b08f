use serde::{Deserialize, Serialize};

use super::{Decimal2, EvalError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RobustnessRecord {
    pub sample_id: String,
    pub s1_correct: bool,
    pub rag_correct: bool,
    pub final_correct: bool,
}

impl RobustnessRecord {
    /// The preliminary judgment was right but the retrieved majority was
    /// wrong, so the evidence pulls the model away from the truth.
    pub fn is_adversarial(&self) -> bool {
        self.s1_correct && !self.rag_correct
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RobustnessResult {
    pub adversarial: u64,
    pub correct: u64,
    pub rate: Decimal2,
}

impl RobustnessResult {
    pub fn from_counts(adversarial: u64, correct: u64) -> Result<Self, EvalError> {
        if adversarial == 0 {
            return Err(EvalError::NoAdversarialSamples);
        }
        Ok(RobustnessResult { adversarial, correct, rate: Decimal2::percent(correct, adversarial) })
    }
}

pub fn robustness_rate(records: &[RobustnessRecord]) -> Result<RobustnessResult, EvalError> {
    let adversarial: Vec<_> = records.iter().filter(|r| r.is_adversarial()).collect();
    let correct = adversarial.iter().filter(|r| r.final_correct).count();
    RobustnessResult::from_counts(adversarial.len() as u64, correct as u64)
}

/// Pools several sets: total correct over total adversarial.
pub fn weighted_robustness(sets: &[RobustnessResult]) -> Result<RobustnessResult, EvalError> {
    let adversarial = sets.iter().map(|s| s.adversarial).sum();
    let correct = sets.iter().map(|s| s.correct).sum();
    RobustnessResult::from_counts(adversarial, correct)
}
