use crate::fcot::FCotResponse;
use crate::fkd::Label;
use crate::gateway::TokenLogprob;

fn label_of_token(token: &str) -> Option<Label> {
    let t = token.trim().trim_matches(|c: char| c.is_ascii_punctuation()).to_ascii_lowercase();
    match t.as_str() {
        "real" => Some(Label::Real),
        "fake" => Some(Label::Fake),
        _ => None,
    }
}

/// Log-probabilities of the real and fake alternatives at the last answer
/// token, when both are visible.
fn answer_alternatives(logprobs: &[TokenLogprob]) -> Option<(f64, f64)> {
    let position = logprobs.iter().rev().find(|t| label_of_token(&t.token).is_some())?;
    let mut real: Option<f64> = None;
    let mut fake: Option<f64> = None;
    let candidates = std::iter::once((position.token.as_str(), position.logprob))
        .chain(position.top_logprobs.iter().map(|t| (t.token.as_str(), t.logprob)));
    for (token, lp) in candidates {
        if !lp.is_finite() {
            continue;
        }
        let slot = match label_of_token(token) {
            Some(Label::Real) => &mut real,
            Some(Label::Fake) => &mut fake,
            None => continue,
        };
        *slot = Some(slot.map_or(lp, |cur: f64| cur.max(lp)));
    }
    Some((real?, fake?))
}

/// Probability that the frame is fake.
///
/// With both answer alternatives visible in the logprobs the score is the
/// normalized mass on "fake"; otherwise it is 1 for Fake, 0 for Real and 0.5
/// when no answer could be parsed.
pub fn answer_to_score(response: &FCotResponse, logprobs: Option<&[TokenLogprob]>) -> f64 {
    let Some(answer) = response.answer else {
        return 0.5;
    };
    if let Some((lr, lf)) = logprobs.and_then(answer_alternatives) {
        return 1.0 / (1.0 + (lr - lf).exp());
    }
    match answer {
        Label::Fake => 1.0,
        Label::Real => 0.0,
    }
}
