use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use once_cell::sync::Lazy;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ChatBackend, ChatRequest, ChatResponse, GatewayError, TokenLogprob, TopLogprob, Usage};
use crate::fcot::{serialize_fcot, FCotResponse};
use crate::fkd::Label;

static GROUND_TRUTH: Lazy<Regex> = Lazy::new(|| Regex::new(r"Ground_Truth_Label:[ \t]*(Real|Fake)\b").unwrap());
static EVIDENCE_LINE: Lazy<Regex> = Lazy::new(|| Regex::new(r#"(?m)^\d+\. \("(Real|Fake):"#).unwrap());

/// A scripted reply for one request fingerprint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockReply {
    Text(String),
    /// Generate the reply with the rule engine.
    Rule,
    Fail {
        status: u16,
        body: String,
    },
    /// Fail `failures` times with `status`, then answer `text`.
    Transient {
        failures: u32,
        status: u16,
        text: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MockStats {
    pub calls: usize,
    pub peak_inflight: usize,
}

/// Deterministic stand-in for a chat endpoint.
///
/// Scripted fingerprints get their scripted reply. Other requests are either
/// rejected (strict mode) or answered by a rule engine that recognizes the
/// built-in prompt families and emits well-formed output. Rule output is a
/// pure function of the seed and the request fingerprint.
pub struct MockResponder {
    script: BTreeMap<String, MockReply>,
    strict: bool,
    seed: u64,
    format_noise: f64,
    delay_max_ms: u64,
    failures_seen: Mutex<BTreeMap<String, u32>>,
    calls: AtomicUsize,
    inflight: AtomicUsize,
    peak: AtomicUsize,
}

impl MockResponder {
    pub fn scripted(script: BTreeMap<String, MockReply>, strict: bool) -> Self {
        MockResponder {
            script,
            strict,
            seed: 0,
            format_noise: 0.0,
            delay_max_ms: 0,
            failures_seen: Mutex::new(BTreeMap::new()),
            calls: AtomicUsize::new(0),
            inflight: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
        }
    }

    /// Rule-mode responder with no script.
    pub fn rules(seed: u64) -> Self {
        MockResponder { seed, ..Self::scripted(BTreeMap::new(), false) }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Fraction of generated chain-of-thought replies that drop a section.
    pub fn with_format_noise(mut self, rate: f64) -> Self {
        self.format_noise = rate.clamp(0.0, 1.0);
        self
    }

    /// Sleeps up to `max_ms` per call, varying by fingerprint.
    pub fn with_delays(mut self, max_ms: u64) -> Self {
        self.delay_max_ms = max_ms;
        self
    }

    pub fn stats(&self) -> MockStats {
        MockStats { calls: self.calls.load(Ordering::SeqCst), peak_inflight: self.peak.load(Ordering::SeqCst) }
    }

    fn rng(&self, fingerprint: &str) -> ChaCha8Rng {
        let digest = Sha256::digest(format!("{}:{fingerprint}", self.seed).as_bytes());
        ChaCha8Rng::from_seed(digest.into())
    }

    fn reply(&self, request: &ChatRequest, fingerprint: &str) -> Result<ChatResponse, GatewayError> {
        match self.script.get(fingerprint) {
            Some(MockReply::Text(t)) => finish(t.clone()),
            Some(MockReply::Rule) => self.generate(request, fingerprint),
            Some(MockReply::Fail { status, body }) => Err(GatewayError::Remote { status: *status, body: body.clone() }),
            Some(MockReply::Transient { failures, status, text }) => {
                let mut seen = self.failures_seen.lock().unwrap();
                let n = seen.entry(fingerprint.to_string()).or_insert(0);
                if *n < *failures {
                    *n += 1;
                    return Err(GatewayError::Remote { status: *status, body: "transient".into() });
                }
                finish(text.clone())
            }
            None if self.strict => Err(GatewayError::UnscriptedRequest(fingerprint.to_string())),
            None => self.generate(request, fingerprint),
        }
    }

    fn generate(&self, request: &ChatRequest, fingerprint: &str) -> Result<ChatResponse, GatewayError> {
        let mut rng = self.rng(fingerprint);
        let prompt = request.prompt_text();
        let label = |rng: &mut ChaCha8Rng| if rng.gen_bool(0.5) { Label::Real } else { Label::Fake };

        if let Some(c) = GROUND_TRUTH.captures(&prompt) {
            let truth: Label = c[1].parse().expect("regex admits only labels");
            let s1 = if prompt.contains("perfect student model") { truth.flipped() } else { truth };
            return finish(self.teacher_cot(&mut rng, truth, s1));
        }
        if prompt.contains("faithfulness:") {
            let mut score = || rng.gen_range(1..=3);
            return finish(format!("accuracy: {}\nfaithfulness: {}\nprofessionalism: {}", score(), score(), score()));
        }
        if prompt.contains("[Real Image]") {
            return finish(real_annotation(&mut rng));
        }
        if prompt.contains("[Manipulated Image]") {
            return finish(fake_annotation(&mut rng));
        }
        if prompt.contains("RAG_Context:") {
            let votes: Vec<Label> =
                EVIDENCE_LINE.captures_iter(&prompt).map(|c| c[1].parse().expect("regex admits only labels")).collect();
            let s1 = label(&mut rng);
            let fake = votes.iter().filter(|l| **l == Label::Fake).count();
            let answer = if votes.is_empty() {
                s1
            } else if 2 * fake > votes.len() {
                Label::Fake
            } else {
                Label::Real
            };
            let text = self.inference_cot(&mut rng, s1, answer, &votes);
            let mut response = finish(text)?;
            if request.want_logprobs {
                response.token_logprobs = Some(answer_logprobs(&mut rng, answer));
            }
            return Ok(response);
        }
        if prompt.contains("Real or Fake") {
            let answer = label(&mut rng);
            let mut response = finish(answer.to_string())?;
            if request.want_logprobs {
                response.token_logprobs = Some(answer_logprobs(&mut rng, answer));
            }
            return Ok(response);
        }
        Err(GatewayError::UnscriptedRequest(fingerprint.to_string()))
    }

    fn noisy(&self, rng: &mut ChaCha8Rng, text: String) -> String {
        if self.format_noise > 0.0 && rng.gen_bool(self.format_noise) {
            let open = text.find("<Fusion, Reasoning, and Decision>").unwrap_or(text.len());
            let close = "</Fusion, Reasoning, and Decision>";
            let end = text.find(close).map_or(text.len(), |i| i + close.len());
            format!("{}{}", &text[..open], &text[end..])
        } else {
            text
        }
    }

    fn teacher_cot(&self, rng: &mut ChaCha8Rng, truth: Label, s1: Label) -> String {
        let cue = pick(rng, CUES);
        let preliminary = if s1 == truth {
            format!("I examine the {cue}. The visual evidence points to a {s1} image.")
        } else {
            format!("The overall lighting seems consistent and no obvious artifacts are immediately visible. At first glance, it seems to be a {s1} image.")
        };
        let rag = format!("The retrieved references were compared with the {cue}; the high-scoring items are weighed against the visual facts.");
        let fusion = if s1 == truth {
            format!(
                "Re-checking the {cue} confirms the initial assessment; contradicting references are treated as noise."
            )
        } else {
            format!("Re-examining the {cue} as the references suggest reveals subtle artifacts that were missed, so the first impression is revised.")
        };
        let body = serialize_fcot(&FCotResponse::new(preliminary, rag, fusion, truth, Some(s1)))
            .expect("generated sections are tag-free");
        // teachers do not print the marker line; the preliminary sentence carries the judgment
        let body = body.replace(&format!("\nInitial Judgment: {s1}"), "");
        self.noisy(rng, body)
    }

    fn inference_cot(&self, rng: &mut ChaCha8Rng, s1: Label, answer: Label, votes: &[Label]) -> String {
        let cue = pick(rng, CUES);
        let fake = votes.iter().filter(|l| **l == Label::Fake).count();
        let response = FCotResponse::new(
            format!("Looking at the {cue} independently."),
            format!("{} of {} references indicate forgery.", fake, votes.len()),
            format!("Weighing the {cue} against the references leads to the final decision."),
            answer,
            Some(s1),
        );
        let text = serialize_fcot(&response).expect("generated sections are tag-free");
        self.noisy(rng, text)
    }

    fn delay(&self, fingerprint: &str) {
        if self.delay_max_ms > 0 {
            let ms = self.rng(fingerprint).gen_range(0..=self.delay_max_ms);
            std::thread::sleep(Duration::from_millis(ms));
        }
    }
}

const CUES: &[&str] = &[
    "mouth edge",
    "skin texture on the cheeks",
    "eye region",
    "facial contour",
    "lighting on the forehead",
    "lip boundary",
];

const FAKE_FINDINGS: &[(&str, &str)] = &[
    ("Skin", "Central area cool white, periphery yellowish, clear blending boundary."),
    ("Eyebrows", "Ghosting caused by facial alignment failure."),
    ("Mouth", "Blurred lip boundary with smeared teeth."),
    ("Eyes", "Iris texture lost and eyelids misaligned."),
    ("Facial Contour", "Visible splicing line along the jaw."),
];

const REAL_FINDINGS: &[(&str, &str)] = &[
    ("Skin Texture Details", "Skin texture on the cheeks is clear and consistent with the neck."),
    ("Lighting Consistency", "Lighting direction on the face and neck is consistent."),
    ("Facial Structure", "Features conform to anatomical structure with no misalignment."),
    ("Lip Shape", "Lip shape is natural and the shadow under the lower lip is natural."),
];

fn pick<'a>(rng: &mut ChaCha8Rng, options: &[&'a str]) -> &'a str {
    options.choose(rng).copied().unwrap_or_default()
}

fn findings(rng: &mut ChaCha8Rng, pool: &[(&str, &str)]) -> Vec<(String, String)> {
    let n = rng.gen_range(1..=3);
    let mut chosen: Vec<_> = pool.choose_multiple(rng, n).collect();
    chosen.sort();
    chosen.into_iter().map(|(r, d)| (r.to_string(), d.to_string())).collect()
}

fn fake_annotation(rng: &mut ChaCha8Rng) -> String {
    let f = findings(rng, FAKE_FINDINGS);
    let regions: Vec<&str> = f.iter().map(|(r, _)| r.as_str()).collect();
    let clauses: Vec<String> = f.iter().map(|(r, d)| format!("[{r}]: {d}")).collect();
    format!("Manipulated Regions: {}\nForgery Artifacts: {}", regions.join(", "), clauses.join(" "))
}

fn real_annotation(rng: &mut ChaCha8Rng) -> String {
    let clauses: Vec<String> = findings(rng, REAL_FINDINGS).into_iter().map(|(r, d)| format!("[{r}]: {d}")).collect();
    format!("Indicators of Authenticity:\n{}", clauses.join("\n"))
}

fn answer_logprobs(rng: &mut ChaCha8Rng, answer: Label) -> Vec<TokenLogprob> {
    let p: f64 = rng.gen_range(0.55..0.99);
    let top = vec![
        TopLogprob { token: answer.to_string(), logprob: p.ln() },
        TopLogprob { token: answer.flipped().to_string(), logprob: (1.0 - p).ln() },
    ];
    vec![TokenLogprob { token: answer.to_string(), logprob: p.ln(), top_logprobs: top }]
}

fn finish(text: String) -> Result<ChatResponse, GatewayError> {
    if text.is_empty() {
        return Err(GatewayError::MalformedPayload("empty completion".into()));
    }
    let completion_tokens = text.split_whitespace().count() as u64;
    Ok(ChatResponse { usage: Usage { prompt_tokens: 0, completion_tokens }, ..ChatResponse::text(text) })
}

impl ChatBackend for MockResponder {
    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let now = self.inflight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        let fingerprint = request.fingerprint();
        self.delay(&fingerprint);
        let out = self.reply(request, &fingerprint);
        self.inflight.fetch_sub(1, Ordering::SeqCst);
        out.map(|mut r| {
            r.usage.prompt_tokens = request.prompt_text().split_whitespace().count() as u64;
            r
        })
    }
}
