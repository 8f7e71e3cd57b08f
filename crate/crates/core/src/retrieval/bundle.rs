use serde::{Deserialize, Serialize};

use super::RetrievalError;
use crate::fkd::Label;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceItem {
    pub entry_id: String,
    pub label: Label,
    pub similarity: f64,
    pub annotation: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceBundle {
    pub query_id: String,
    pub items: Vec<EvidenceItem>,
    pub majority_label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rag_correct: Option<bool>,
}

impl EvidenceBundle {
    pub fn k(&self) -> usize {
        self.items.len()
    }

    pub fn count(&self, label: Label) -> usize {
        self.items.iter().filter(|i| i.label == label).count()
    }

    /// Re-derives the majority label and checks ordering; used on bundles read
    /// back from disk.
    pub fn validate(&self) -> Result<(), RetrievalError> {
        let rebuilt = assemble_bundle(&self.query_id, self.items.clone(), None)?;
        if rebuilt.majority_label != self.majority_label {
            return Err(RetrievalError::InvalidBundle(format!(
                "bundle {} records majority {} but items vote {}",
                self.query_id, self.majority_label, rebuilt.majority_label
            )));
        }
        if rebuilt.items != self.items {
            return Err(RetrievalError::InvalidBundle(format!("bundle {} items are not ranked", self.query_id)));
        }
        Ok(())
    }

    /// Sets `rag_correct` against a known ground truth.
    pub fn with_ground_truth(mut self, truth: Label) -> Self {
        self.rag_correct = Some(self.majority_label == truth);
        self
    }
}

/// Builds a bundle from ranked items using strict majority voting over their
/// labels. `k` must be odd so the vote is never tied.
pub fn assemble_bundle(
    query_id: &str,
    mut items: Vec<EvidenceItem>,
    ground_truth: Option<Label>,
) -> Result<EvidenceBundle, RetrievalError> {
    if items.len().is_multiple_of(2) {
        return Err(RetrievalError::EvenK(items.len()));
    }
    if let Some(bad) = items.iter().find(|i| !i.similarity.is_finite()) {
        return Err(RetrievalError::NonFinite(bad.entry_id.clone()));
    }
    items.sort_by(|a, b| b.similarity.total_cmp(&a.similarity).then_with(|| a.entry_id.cmp(&b.entry_id)));
    let fake = items.iter().filter(|i| i.label == Label::Fake).count();
    let majority_label = if 2 * fake > items.len() { Label::Fake } else { Label::Real };
    Ok(EvidenceBundle {
        query_id: query_id.to_string(),
        items,
        majority_label,
        rag_correct: ground_truth.map(|t| t == majority_label),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn items(labels: &[Label]) -> Vec<EvidenceItem> {
        labels
            .iter()
            .enumerate()
            .map(|(i, &label)| EvidenceItem {
                entry_id: format!("e{i}"),
                label,
                similarity: 0.9 - i as f64 * 0.1,
                annotation: String::new(),
            })
            .collect()
    }

    use Label::{Fake as F, Real as R};

    #[test]
    fn three_of_five() {
        let b = assemble_bundle("q", items(&[F, F, R, F, R]), None).unwrap();
        assert_eq!(b.majority_label, Label::Fake);
        assert_eq!(b.rag_correct, None);
    }

    #[test]
    fn rag_correct_from_ground_truth() {
        let b = assemble_bundle("q", items(&[F, F, R, F, R]), Some(Label::Fake)).unwrap();
        assert_eq!(b.rag_correct, Some(true));
        let b = assemble_bundle("q", items(&[F, F, R, F, R]), Some(Label::Real)).unwrap();
        assert_eq!(b.rag_correct, Some(false));
    }

    #[test]
    fn even_k_rejected() {
        assert!(matches!(assemble_bundle("q", items(&[F, R, F, R]), None), Err(RetrievalError::EvenK(4))));
        assert!(matches!(assemble_bundle("q", vec![], None), Err(RetrievalError::EvenK(0))));
    }

    #[test]
    fn items_are_ranked() {
        let mut its = items(&[R, F, F]);
        its.reverse();
        let b = assemble_bundle("q", its, None).unwrap();
        assert_eq!(b.items[0].entry_id, "e0");
        assert!(b.validate().is_ok());
        let mut tampered = b.clone();
        tampered.majority_label = Label::Real;
        assert!(tampered.validate().is_err());
    }
}
