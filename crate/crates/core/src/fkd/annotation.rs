use super::{FkdError, RegionFinding};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AnnotationMode {
    #[default]
    Lenient,
    Strict,
}

struct Clause {
    start: usize,
    body_start: usize,
    region: String,
}

/// Extracts every `[region]: description` clause in order of appearance.
///
/// A description runs until the next clause header or the end of the text.
/// Brackets not followed by a colon are treated as ordinary description text.
pub fn parse_annotation(text: &str, mode: AnnotationMode) -> Result<Vec<RegionFinding>, FkdError> {
    if text.trim().is_empty() {
        return Err(FkdError::EmptyAnnotation);
    }

    let clauses = find_clauses(text, mode)?;
    let mut findings = Vec::with_capacity(clauses.len());
    for (i, clause) in clauses.iter().enumerate() {
        let end = clauses.get(i + 1).map_or(text.len(), |next| next.start);
        let description = clean_description(&text[clause.body_start..end]);
        if description.is_empty() {
            if mode == AnnotationMode::Strict {
                return Err(FkdError::MalformedClause {
                    offset: clause.start,
                    reason: format!("region [{}] has no description", clause.region),
                });
            }
            continue;
        }
        findings.push(RegionFinding { region: clause.region.clone(), description });
    }
    Ok(findings)
}

fn find_clauses(text: &str, mode: AnnotationMode) -> Result<Vec<Clause>, FkdError> {
    let bytes = text.as_bytes();
    let mut clauses = Vec::new();
    let mut pos = 0;
    while let Some(rel) = text[pos..].find('[') {
        let open = pos + rel;
        let Some(close_rel) = text[open + 1..].find(']') else {
            if mode == AnnotationMode::Strict {
                return Err(FkdError::MalformedClause {
                    offset: open,
                    reason: "bracket opened but never closed".into(),
                });
            }
            break;
        };
        let close = open + 1 + close_rel;
        let inner = &text[open + 1..close];
        // a nested '[' means the outer bracket was never closed
        if let Some(nested) = inner.find('[') {
            if mode == AnnotationMode::Strict {
                return Err(FkdError::MalformedClause {
                    offset: open,
                    reason: "bracket opened but never closed".into(),
                });
            }
            pos = open + 1 + nested;
            continue;
        }

        let mut after = close + 1;
        while after < bytes.len() && (bytes[after] == b' ' || bytes[after] == b'\t') {
            after += 1;
        }
        let region = inner.trim();
        if after < bytes.len() && bytes[after] == b':' && !region.is_empty() {
            clauses.push(Clause { start: open, body_start: after + 1, region: region.to_string() });
            pos = after + 1;
        } else {
            pos = close + 1;
        }
    }
    Ok(clauses)
}

fn clean_description(raw: &str) -> String {
    raw.trim().trim_matches(|c: char| matches!(c, '"' | '\'' | '“' | '”' | '‘' | '’') || c.is_whitespace()).to_string()
}

/// Renders findings back into `[region]: description` clauses.
pub fn render_findings(findings: &[RegionFinding]) -> String {
    findings.iter().map(|f| format!("[{}]: {}", f.region, f.description)).collect::<Vec<_>>().join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_clause() {
        let f = parse_annotation("[mouth region]: abnormal blending", AnnotationMode::Strict).unwrap();
        assert_eq!(f, vec![RegionFinding { region: "mouth region".into(), description: "abnormal blending".into() }]);
    }

    #[test]
    fn teacher_style_annotation() {
        let text = "Forgery Artifacts: [Skin]: Central area cool white... [Eyebrows]: Ghosting caused by facial alignment failure.";
        let f = parse_annotation(text, AnnotationMode::Lenient).unwrap();
        assert_eq!(f.len(), 2);
        assert_eq!(f[0].region, "Skin");
        assert_eq!(f[0].description, "Central area cool white...");
        assert_eq!(f[1].region, "Eyebrows");
        assert_eq!(f[1].description, "Ghosting caused by facial alignment failure.");
    }

    #[test]
    fn empty_is_error() {
        assert!(matches!(parse_annotation("", AnnotationMode::Lenient), Err(FkdError::EmptyAnnotation)));
        assert!(matches!(parse_annotation("  \n ", AnnotationMode::Strict), Err(FkdError::EmptyAnnotation)));
    }

    #[test]
    fn unclosed_bracket() {
        let text = "[Skin]: fine. [Mouth: blurry";
        assert!(matches!(
            parse_annotation(text, AnnotationMode::Strict),
            Err(FkdError::MalformedClause { offset: 14, .. })
        ));
        let lenient = parse_annotation(text, AnnotationMode::Lenient).unwrap();
        assert_eq!(lenient.len(), 1);
        assert_eq!(lenient[0].description, "fine. [Mouth: blurry");
    }

    #[test]
    fn no_clauses_lenient_is_empty() {
        let f = parse_annotation("Indicators of Authenticity: the lighting is consistent.", AnnotationMode::Lenient)
            .unwrap();
        assert!(f.is_empty());
    }

    #[test]
    fn quoted_descriptions_and_plain_brackets() {
        let text = "[Lips]: \"Lip surface abnormally smooth, see [Mouth] area\"\n[Facial Skin]: 'airbrushed'";
        let f = parse_annotation(text, AnnotationMode::Strict).unwrap();
        assert_eq!(f.len(), 2);
        assert_eq!(f[0].description, "Lip surface abnormally smooth, see [Mouth] area");
        assert_eq!(f[1].description, "airbrushed");
    }

    #[test]
    fn empty_description_strict() {
        assert!(parse_annotation("[Skin]: [Eyes]: blurry", AnnotationMode::Strict).is_err());
        let f = parse_annotation("[Skin]: [Eyes]: blurry", AnnotationMode::Lenient).unwrap();
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].region, "Eyes");
    }

    fn field() -> impl Strategy<Value = String> {
        "[A-Za-z0-9][A-Za-z0-9 ,.;:!?()-]{0,30}[A-Za-z0-9.!)]"
    }

    proptest! {
        #[test]
        fn parse_render_identity(findings in prop::collection::vec((field(), field()), 1..6)) {
            let findings: Vec<RegionFinding> = findings
                .into_iter()
                .map(|(region, description)| RegionFinding { region, description })
                .collect();
            let text = render_findings(&findings);
            let parsed = parse_annotation(&text, AnnotationMode::Strict).unwrap();
            prop_assert_eq!(parsed, findings);
        }
    }
}
