use serde::{Deserialize, Serialize};

use crate::retrieval::EvidenceBundle;

/// Rendered evidence lines plus any lint warnings raised while rendering.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidenceBlock {
    pub text: String,
    pub lints: Vec<String>,
}

/// Renders a bundle as numbered `i. ("Label: annotation", 0.85)` lines in
/// bundle order.
pub fn format_evidence_block(bundle: &EvidenceBundle) -> EvidenceBlock {
    let mut lines = Vec::with_capacity(bundle.items.len());
    let mut lints = Vec::new();
    for (i, item) in bundle.items.iter().enumerate() {
        let annotation = item.annotation.split_whitespace().collect::<Vec<_>>().join(" ");
        if annotation.is_empty() {
            let msg = format!("{}: evidence {} ({}) has an empty annotation", bundle.query_id, i + 1, item.entry_id);
            log::warn!("{msg}");
            lints.push(msg);
        }
        lines.push(format!("{}. (\"{}: {}\", {:.2})", i + 1, item.label, annotation, item.similarity));
    }
    EvidenceBlock { text: lines.join("\n"), lints }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fkd::Label;
    use crate::retrieval::{assemble_bundle, EvidenceItem};

    fn item(id: &str, label: Label, annotation: &str, similarity: f64) -> EvidenceItem {
        EvidenceItem { entry_id: id.into(), label, similarity, annotation: annotation.into() }
    }

    #[test]
    fn renders_lines() {
        let b = assemble_bundle(
            "q",
            vec![
                item("a", Label::Fake, "mouth artifact", 0.85),
                item("b", Label::Real, "clear skin texture", 0.7),
                item("c", Label::Fake, "x", 0.1),
            ],
            None,
        )
        .unwrap();
        let block = format_evidence_block(&b);
        let lines: Vec<&str> = block.text.lines().collect();
        assert_eq!(lines[0], "1. (\"Fake: mouth artifact\", 0.85)");
        assert_eq!(lines[1], "2. (\"Real: clear skin texture\", 0.70)");
        assert_eq!(lines.len(), 3);
        assert!(block.lints.is_empty());
    }

    #[test]
    fn empty_annotation_is_linted() {
        let b = assemble_bundle("q", vec![item("a", Label::Real, "  ", 0.5)], None).unwrap();
        let block = format_evidence_block(&b);
        assert_eq!(block.text, "1. (\"Real: \", 0.50)");
        assert_eq!(block.lints.len(), 1);
    }

    #[test]
    fn multiline_annotations_are_collapsed() {
        let b = assemble_bundle("q", vec![item("a", Label::Fake, "[Skin]: waxy\n[Eyes]:  blur", 0.912)], None).unwrap();
        assert_eq!(format_evidence_block(&b).text, "1. (\"Fake: [Skin]: waxy [Eyes]: blur\", 0.91)");
    }
}
