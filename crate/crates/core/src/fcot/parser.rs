use once_cell::sync::Lazy;
use regex::{Captures, Regex};

use super::{FCotResponse, FcotError, ParseMode, SectionTag, Violation};
use crate::fkd::Label;

static STRICT_TAG: Lazy<Regex> = Lazy::new(|| {
    Regex::new(r"<(/?)(Preliminary Visual Analysis|RAG Reference Information Analysis|Fusion, Reasoning, and Decision|Answer)>")
        .unwrap()
});

static LENIENT_TAG: Lazy<Regex> = Lazy::new(|| {
    Regex::new(
        r"(?i)<\s*(/?)\s*(preliminary\s+visual\s+analysis|rag\s+reference\s+information\s+analysis|fusion,?\s+reasoning,?\s+and\s+decision|answer)\s*>(?:[ \t]*:)?",
    )
    .unwrap()
});

static MARKER: Lazy<Regex> =
    Lazy::new(|| Regex::new(r"(?i)initial[ \t]+judge?ment[ \t]*:[ \t]*(real|fake|unknown)\b").unwrap());

static KEYWORD: Lazy<Regex> = Lazy::new(|| Regex::new(r"(?i)\b(real|fake)\b").unwrap());

struct Token {
    start: usize,
    end: usize,
    tag: SectionTag,
    closing: bool,
}

fn tag_from_name(name: &str) -> SectionTag {
    let lower = name.to_ascii_lowercase();
    if lower.starts_with("preliminary") {
        SectionTag::PreliminaryVisualAnalysis
    } else if lower.starts_with("rag") {
        SectionTag::RagReferenceInformationAnalysis
    } else if lower.starts_with("fusion") {
        SectionTag::FusionReasoningAndDecision
    } else {
        SectionTag::Answer
    }
}

fn tokenize(text: &str, mode: ParseMode) -> Vec<Token> {
    let re = match mode {
        ParseMode::Strict => &*STRICT_TAG,
        ParseMode::Lenient => &*LENIENT_TAG,
    };
    re.captures_iter(text)
        .map(|c: Captures| {
            let m = c.get(0).unwrap();
            Token { start: m.start(), end: m.end(), tag: tag_from_name(&c[2]), closing: !c[1].is_empty() }
        })
        .collect()
}

/// Parses a model response into its four sections. Never fails: problems
/// are reported as violations and clear `format_valid`.
pub fn parse_fcot(text: &str, mode: ParseMode) -> FCotResponse {
    let mut violations = Vec::new();
    let mut sections: [Option<String>; 4] = Default::default();
    let mut opened = [0usize; 4];
    let mut open: Option<(SectionTag, usize)> = None;
    let mut max_rank: Option<usize> = None;

    for tok in tokenize(text, mode) {
        if tok.closing {
            match open {
                Some((tag, body)) if tag == tok.tag => {
                    let slot = &mut sections[tag.rank()];
                    if slot.is_none() {
                        *slot = Some(text[body..tok.start].trim().to_string());
                    }
                    open = None;
                }
                _ => violations.push(Violation::UnmatchedTag(tok.tag)),
            }
            continue;
        }

        if let Some((prev, _)) = open.take() {
            violations.push(Violation::UnmatchedTag(prev));
        }
        let rank = tok.tag.rank();
        opened[rank] += 1;
        if opened[rank] == 2 {
            violations.push(Violation::DuplicateSection(tok.tag));
        }
        if max_rank.is_some_and(|m| rank < m) {
            violations.push(Violation::OutOfOrder(tok.tag));
        }
        max_rank = Some(max_rank.map_or(rank, |m| m.max(rank)));
        open = Some((tok.tag, tok.end));
    }
    if let Some((tag, _)) = open {
        violations.push(Violation::UnmatchedTag(tag));
    }
    for tag in SectionTag::ALL {
        if opened[tag.rank()] == 0 {
            violations.push(Violation::MissingSection(tag));
        }
    }

    let mut answer = None;
    if let Some(raw) = &sections[SectionTag::Answer.rank()] {
        answer = normalize_answer(raw);
        let exact = matches!(raw.trim(), "Real" | "Fake");
        if answer.is_none() || (mode == ParseMode::Strict && !exact) {
            violations.push(Violation::BadAnswerToken(raw.clone()));
        }
    }

    let [preliminary, rag_analysis, fusion, _] = sections;
    let preliminary = preliminary.unwrap_or_default();
    let s1_pred = extract_s1_pred(&preliminary);
    FCotResponse {
        preliminary: strip_trailing_marker(&preliminary).to_string(),
        rag_analysis: rag_analysis.unwrap_or_default(),
        fusion: fusion.unwrap_or_default(),
        answer,
        s1_pred,
        format_valid: violations.is_empty(),
        violations,
    }
}

fn normalize_answer(raw: &str) -> Option<Label> {
    let token = raw.trim().trim_end_matches(['.', ',', '!', ';', ':']).trim().to_lowercase();
    match token.as_str() {
        "real" => Some(Label::Real),
        "fake" => Some(Label::Fake),
        _ => None,
    }
}

/// Reads the preliminary judgment from a section-1 text.
///
/// The last `Initial Judgment: <Real|Fake|Unknown>` marker wins; without a
/// marker the last standalone real/fake keyword is used.
pub fn extract_s1_pred(preliminary: &str) -> Option<Label> {
    if let Some(c) = MARKER.captures_iter(preliminary).last() {
        return match c[1].to_ascii_lowercase().as_str() {
            "real" => Some(Label::Real),
            "fake" => Some(Label::Fake),
            _ => None,
        };
    }
    KEYWORD.captures_iter(preliminary).last().map(|c| {
        if c[1].eq_ignore_ascii_case("real") {
            Label::Real
        } else {
            Label::Fake
        }
    })
}

fn trailing_marker_start(text: &str) -> Option<usize> {
    let m = MARKER.find_iter(text).last()?;
    let rest = text[m.end()..].trim_matches(|c: char| c.is_whitespace() || c == '.');
    rest.is_empty().then_some(m.start())
}

fn strip_trailing_marker(text: &str) -> &str {
    match trailing_marker_start(text) {
        Some(start) => text[..start].trim_end(),
        None => text,
    }
}

/// Emits the canonical tagged form. The preliminary section always ends
/// with an explicit `Initial Judgment:` line.
pub fn serialize_fcot(response: &FCotResponse) -> Result<String, FcotError> {
    if !response.format_valid || !response.violations.is_empty() {
        return Err(FcotError::InvalidResponse(format!(
            "response has violations: {}",
            response.violation_codes().join(", ")
        )));
    }
    let Some(answer) = response.answer else {
        return Err(FcotError::InvalidResponse("response has no answer".into()));
    };
    let parts = [
        (SectionTag::PreliminaryVisualAnalysis, response.preliminary.trim()),
        (SectionTag::RagReferenceInformationAnalysis, response.rag_analysis.trim()),
        (SectionTag::FusionReasoningAndDecision, response.fusion.trim()),
    ];
    for (tag, body) in parts {
        if LENIENT_TAG.is_match(body) {
            return Err(FcotError::InvalidResponse(format!("{tag} contains section tag text")));
        }
    }
    if trailing_marker_start(parts[0].1).is_some() {
        return Err(FcotError::InvalidResponse("preliminary text already ends with a judgment marker".into()));
    }

    let judgment = response.s1_pred.map_or("Unknown", Label::as_str);
    let mut out = String::new();
    for (tag, body) in parts {
        out.push_str(&format!("<{}>\n", tag.name()));
        if !body.is_empty() {
            out.push_str(body);
            out.push('\n');
        }
        if tag == SectionTag::PreliminaryVisualAnalysis {
            out.push_str(&format!("Initial Judgment: {judgment}\n"));
        }
        out.push_str(&format!("</{}>\n", tag.name()));
    }
    out.push_str(&format!("<Answer> {answer} </Answer>"));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn well_formed(answer: &str) -> String {
        format!(
            "<Preliminary Visual Analysis>\nThe mouth edge looks blurred. Initial Judgment: Fake\n</Preliminary Visual Analysis>\n\
             <RAG Reference Information Analysis>\n4 of 5 references are Fake.\n</RAG Reference Information Analysis>\n\
             <Fusion, Reasoning, and Decision>\nThe blur is confirmed.\n</Fusion, Reasoning, and Decision>\n\
             <Answer> {answer} </Answer>"
        )
    }

    #[test]
    fn well_formed_fake() {
        let r = parse_fcot(&well_formed("Fake"), ParseMode::Strict);
        assert!(r.format_valid, "{:?}", r.violations);
        assert_eq!(r.answer, Some(Label::Fake));
        assert_eq!(r.s1_pred, Some(Label::Fake));
        assert_eq!(r.preliminary, "The mouth edge looks blurred.");
        assert_eq!(r.rag_analysis, "4 of 5 references are Fake.");
    }

    #[test]
    fn missing_fusion() {
        let text = "<Preliminary Visual Analysis> a </Preliminary Visual Analysis>\
                    <RAG Reference Information Analysis> b </RAG Reference Information Analysis>\
                    <Answer> Real </Answer>";
        let r = parse_fcot(text, ParseMode::Strict);
        assert!(!r.format_valid);
        assert_eq!(r.violations, vec![Violation::MissingSection(SectionTag::FusionReasoningAndDecision)]);
        assert_eq!(r.answer, Some(Label::Real));
    }

    #[test]
    fn answer_normalization_by_mode() {
        let text = well_formed("FAKE.");
        let lenient = parse_fcot(&text, ParseMode::Lenient);
        assert!(lenient.format_valid);
        assert_eq!(lenient.answer, Some(Label::Fake));

        let strict = parse_fcot(&text, ParseMode::Strict);
        assert_eq!(strict.answer, Some(Label::Fake));
        assert_eq!(strict.violations, vec![Violation::BadAnswerToken("FAKE.".into())]);
    }

    #[test]
    fn unparseable_answer() {
        let r = parse_fcot(&well_formed("probably forged"), ParseMode::Lenient);
        assert_eq!(r.answer, None);
        assert!(!r.format_valid);
        assert_eq!(r.violation_codes(), vec!["BadAnswerToken"]);
    }

    #[test]
    fn duplicate_and_order() {
        let text = "<RAG Reference Information Analysis> b </RAG Reference Information Analysis>\
                    <Preliminary Visual Analysis> a </Preliminary Visual Analysis>\
                    <Fusion, Reasoning, and Decision> c </Fusion, Reasoning, and Decision>\
                    <Fusion, Reasoning, and Decision> d </Fusion, Reasoning, and Decision>\
                    <Answer>Real</Answer>";
        let r = parse_fcot(text, ParseMode::Strict);
        assert_eq!(
            r.violations,
            vec![
                Violation::OutOfOrder(SectionTag::PreliminaryVisualAnalysis),
                Violation::DuplicateSection(SectionTag::FusionReasoningAndDecision),
            ]
        );
        assert_eq!(r.fusion, "c");
    }

    #[test]
    fn unmatched_tags() {
        let text = "<Preliminary Visual Analysis> a \
                    <RAG Reference Information Analysis> b </RAG Reference Information Analysis>\
                    <Fusion, Reasoning, and Decision> c </Answer>\
                    <Answer>Real</Answer>";
        let r = parse_fcot(text, ParseMode::Strict);
        assert!(r.violations.contains(&Violation::UnmatchedTag(SectionTag::PreliminaryVisualAnalysis)));
        assert!(r.violations.contains(&Violation::UnmatchedTag(SectionTag::Answer)));
        assert!(!r.format_valid);
    }

    #[test]
    fn lenient_accepts_colon_and_case() {
        let text = "<Preliminary Visual Analysis>:\nlooks fine\n</Preliminary Visual Analysis>\n\
                    <rag reference information analysis>:\nmixed\n</RAG Reference Information Analysis>:\n\
                    <Fusion, Reasoning, and Decision>:\nok\n</Fusion, Reasoning, and Decision>\n\
                    <Answer> Real </Answer>";
        let r = parse_fcot(text, ParseMode::Lenient);
        assert!(r.format_valid, "{:?}", r.violations);
        assert_eq!(r.preliminary, "looks fine");
        assert_eq!(r.rag_analysis, "mixed");
        let strict = parse_fcot(text, ParseMode::Strict);
        assert!(strict.violations.contains(&Violation::MissingSection(SectionTag::RagReferenceInformationAnalysis)));
    }

    #[test]
    fn s1_marker_and_fallback() {
        assert_eq!(
            extract_s1_pred("...At first glance, it seems to be a Real image. Initial Judgment: Real"),
            Some(Label::Real)
        );
        assert_eq!(
            extract_s1_pred("no obvious artifacts are immediately visible... seems to be Real"),
            Some(Label::Real)
        );
        assert_eq!(extract_s1_pred("The lighting is consistent."), None);
        assert_eq!(extract_s1_pred("Looks fake at first. Initial Judgment: Real"), Some(Label::Real));
        assert_eq!(extract_s1_pred("Looks fake. Initial Judgment: Unknown"), None);
        assert_eq!(extract_s1_pred("surreal fakery"), None);
    }

    #[test]
    fn serialize_rejects_invalid() {
        let r = parse_fcot("nothing here", ParseMode::Strict);
        assert!(matches!(serialize_fcot(&r), Err(FcotError::InvalidResponse(_))));
        let tagged = FCotResponse::new("a <Answer> b", "c", "d", Label::Real, None);
        assert!(serialize_fcot(&tagged).is_err());
    }

    #[test]
    fn serialized_answer_block() {
        let r = FCotResponse::new("skin is natural", "all Real", "agree", Label::Real, Some(Label::Real));
        let text = serialize_fcot(&r).unwrap();
        assert_eq!(text.matches("<Answer>").count(), 1);
        assert!(text.ends_with("<Answer> Real </Answer>"));
        assert!(text.contains("Initial Judgment: Real\n</Preliminary Visual Analysis>"));
    }

    fn body() -> impl Strategy<Value = String> {
        "[A-Za-z0-9 ,.()'\n-]{0,60}"
    }

    fn label() -> impl Strategy<Value = Label> {
        prop_oneof![Just(Label::Real), Just(Label::Fake)]
    }

    proptest! {
        #[test]
        fn round_trip(p in body(), r in body(), f in body(), a in label(), s1 in prop::option::of(label())) {
            let resp = FCotResponse::new(p.trim(), r.trim(), f.trim(), a, s1);
            prop_assume!(trailing_marker_start(&resp.preliminary).is_none());
            let text = serialize_fcot(&resp).unwrap();
            for mode in [ParseMode::Strict, ParseMode::Lenient] {
                let back = parse_fcot(&text, mode);
                prop_assert!(back.format_valid);
                prop_assert_eq!(&back.preliminary, &resp.preliminary);
                prop_assert_eq!(&back.rag_analysis, &resp.rag_analysis);
                prop_assert_eq!(&back.fusion, &resp.fusion);
                prop_assert_eq!(back.answer, resp.answer);
                prop_assert_eq!(back.s1_pred, resp.s1_pred);
            }
        }

        #[test]
        fn total_on_random_bytes(bytes in prop::collection::vec(any::<u8>(), 0..400)) {
            let text = String::from_utf8_lossy(&bytes);
            for mode in [ParseMode::Strict, ParseMode::Lenient] {
                let r = parse_fcot(&text, mode);
                prop_assert!(!r.format_valid);
                prop_assert!(!r.violations.is_empty());
            }
        }

        #[test]
        fn valid_implies_answer(text in "(<(/)?(Answer|Preliminary Visual Analysis)> ?(Real|Fake|x)? ?){0,6}") {
            let r = parse_fcot(&text, ParseMode::Lenient);
            if r.format_valid {
                prop_assert!(r.answer.is_some());
            }
            prop_assert_eq!(r.format_valid, r.violations.is_empty());
        }
    }
}
