use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    Stage1,
    Stage2,
    Stage3,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Stage1, Stage::Stage2, Stage::Stage3];

    pub fn number(self) -> u8 {
        self as u8 + 1
    }

    pub fn from_number(n: u8) -> Option<Stage> {
        Stage::ALL.get(usize::from(n).wrapping_sub(1)).copied()
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Stage-{}", self.number())
    }
}

/// Low-rank adapter settings shared by every stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterParams {
    pub rank: u32,
    pub alpha: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecipe {
    pub stage: Stage,
    pub objective: String,
    pub epochs: u32,
    pub learning_rate: f64,
    pub batch_size: u32,
    pub extra_params: BTreeMap<String, f64>,
    pub adapter_params: AdapterParams,
    pub tuned_submodules: Vec<String>,
    pub augmentations: Vec<String>,
}

/// Training configuration for a stage. The toolkit does not train; recipes
/// are handed to an external trainer.
pub fn export_training_recipe(stage: Stage) -> TrainingRecipe {
    let strings = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    let (objective, epochs, learning_rate, batch_size) = match stage {
        Stage::Stage1 => ("Alignment", 3, 5e-5, 512),
        Stage::Stage2 => ("SFT", 2, 3e-5, 64),
        Stage::Stage3 => ("GRPO", 1, 1e-6, 32),
    };
    let mut extra_params = BTreeMap::new();
    if stage == Stage::Stage3 {
        extra_params.insert("kl_beta".to_string(), 0.001);
    }
    let (tuned_submodules, augmentations) = match stage {
        Stage::Stage1 => (
            strings(&["vision_encoder", "aligner", "language_model"]),
            strings(&["HorizontalFlip", "ImageCompression", "HueSaturationValue"]),
        ),
        Stage::Stage2 | Stage::Stage3 => (strings(&["aligner", "language_model"]), Vec::new()),
    };
    TrainingRecipe {
        stage,
        objective: objective.to_string(),
        epochs,
        learning_rate,
        batch_size,
        extra_params,
        adapter_params: AdapterParams { rank: 128, alpha: 256 },
        tuned_submodules,
        augmentations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_numbers() {
        assert_eq!(Stage::from_number(2), Some(Stage::Stage2));
        assert_eq!(Stage::from_number(0), None);
        assert_eq!(Stage::from_number(4), None);
        assert_eq!(Stage::Stage3.to_string(), "Stage-3");
    }

    #[test]
    fn frozen_vision_after_stage1() {
        for s in [Stage::Stage2, Stage::Stage3] {
            let r = export_training_recipe(s);
            assert!(!r.tuned_submodules.iter().any(|m| m == "vision_encoder"));
            assert!(r.augmentations.is_empty());
        }
    }
}
