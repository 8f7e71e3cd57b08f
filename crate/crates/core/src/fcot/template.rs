use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use once_cell::sync::Lazy;
use regex::Regex;
use serde::{Deserialize, Serialize};

use super::FcotError;
use crate::fkd::ManipulationMethod;

pub const INFER_TEMPLATE: &str = "infer_fcot";
pub const STAGE1_TEMPLATE: &str = "stage1_vqa";
pub const JUDGE_TEMPLATE: &str = "judge_rubric";

static SLOT: Lazy<Regex> = Lazy::new(|| Regex::new(r"\{\{([A-Za-z_][A-Za-z0-9_]*)\}\}").unwrap());

const BUILTIN: &[(&str, &str)] = &[
    ("annotate_deepfakes", include_str!("../../assets/templates/annotate_deepfakes.txt")),
    ("annotate_face2face", include_str!("../../assets/templates/annotate_face2face.txt")),
    ("annotate_faceswap", include_str!("../../assets/templates/annotate_faceswap.txt")),
    ("annotate_neuraltextures", include_str!("../../assets/templates/annotate_neuraltextures.txt")),
    ("annotate_real", include_str!("../../assets/templates/annotate_real.txt")),
    ("cot_cross_verification", include_str!("../../assets/templates/cot_cross_verification.txt")),
    ("cot_evidence_guided_correction", include_str!("../../assets/templates/cot_evidence_guided_correction.txt")),
    ("cot_resilient_rejection", include_str!("../../assets/templates/cot_resilient_rejection.txt")),
    ("infer_fcot", include_str!("../../assets/templates/infer_fcot.txt")),
    ("stage1_vqa", include_str!("../../assets/templates/stage1_vqa.txt")),
    ("judge_rubric", include_str!("../../assets/templates/judge_rubric.txt")),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptMessage {
    pub role: Role,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub template_id: String,
    pub segments: Vec<(Role, String)>,
    pub required_slots: BTreeSet<String>,
}

impl PromptTemplate {
    /// Parses a template asset. Segments start with a `@@ system` or
    /// `@@ user` header line; slots are written `{{name}}`.
    pub fn parse(template_id: &str, source: &str) -> Result<Self, FcotError> {
        let malformed = |reason: String| FcotError::MalformedTemplate { id: template_id.to_string(), reason };
        let mut segments: Vec<(Role, String)> = Vec::new();
        for line in source.lines() {
            if let Some(header) = line.strip_prefix("@@") {
                let role = match header.trim() {
                    "system" => Role::System,
                    "user" => Role::User,
                    other => return Err(malformed(format!("unknown role {other:?}"))),
                };
                segments.push((role, String::new()));
                continue;
            }
            match segments.last_mut() {
                Some((_, text)) => {
                    text.push_str(line);
                    text.push('\n');
                }
                None if line.trim().is_empty() => {}
                None => return Err(malformed("text before the first role header".into())),
            }
        }
        if segments.is_empty() {
            return Err(malformed("no segments".into()));
        }
        for (_, text) in &mut segments {
            let trimmed = text.trim_end_matches('\n').len();
            text.truncate(trimmed);
        }
        let required_slots =
            segments.iter().flat_map(|(_, text)| SLOT.captures_iter(text).map(|c| c[1].to_string())).collect();
        Ok(PromptTemplate { template_id: template_id.to_string(), segments, required_slots })
    }
}

/// Substitutes slot values in one pass, so values that themselves contain
/// `{{...}}` are left verbatim.
pub fn render_prompt(
    template: &PromptTemplate,
    slots: &BTreeMap<String, String>,
    strict: bool,
) -> Result<Vec<PromptMessage>, FcotError> {
    if let Some(missing) = template.required_slots.iter().find(|s| !slots.contains_key(*s)) {
        return Err(FcotError::MissingSlot(missing.clone()));
    }
    if strict {
        if let Some(unknown) = slots.keys().find(|k| !template.required_slots.contains(*k)) {
            return Err(FcotError::UnknownSlot(unknown.clone()));
        }
    }
    Ok(template
        .segments
        .iter()
        .map(|(role, text)| PromptMessage {
            role: *role,
            content: SLOT.replace_all(text, |c: &regex::Captures| slots[&c[1]].clone()).into_owned(),
        })
        .collect())
}

/// Annotation template for a manipulation method, if one exists.
pub fn annotation_template_id(method: ManipulationMethod) -> Option<&'static str> {
    match method {
        ManipulationMethod::Real => Some("annotate_real"),
        ManipulationMethod::DeepFakes => Some("annotate_deepfakes"),
        ManipulationMethod::Face2Face => Some("annotate_face2face"),
        ManipulationMethod::FaceSwap => Some("annotate_faceswap"),
        ManipulationMethod::NeuralTextures => Some("annotate_neuraltextures"),
        ManipulationMethod::Other => None,
    }
}

/// Templates keyed by id: the built-in assets, optionally overridden from a
/// directory of `<id>.txt` files.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    templates: BTreeMap<String, PromptTemplate>,
}

impl TemplateSet {
    pub fn builtin() -> Self {
        let templates = BUILTIN
            .iter()
            .map(|(id, src)| {
                let t = PromptTemplate::parse(id, src).expect("built-in template parses");
                (id.to_string(), t)
            })
            .collect();
        TemplateSet { templates }
    }

    /// Built-ins overlaid with every `*.txt` file in `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, FcotError> {
        let io = |source| FcotError::Io { path: dir.display().to_string(), source };
        let mut set = Self::builtin();
        let mut paths: Vec<_> = std::fs::read_dir(dir)
            .map_err(io)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "txt"))
            .collect();
        paths.sort();
        for path in paths {
            let id = path.file_stem().unwrap().to_string_lossy().to_string();
            let src = std::fs::read_to_string(&path)
                .map_err(|source| FcotError::Io { path: path.display().to_string(), source })?;
            set.templates.insert(id.clone(), PromptTemplate::parse(&id, &src)?);
        }
        Ok(set)
    }

    pub fn get(&self, id: &str) -> Result<&PromptTemplate, FcotError> {
        self.templates.get(id).ok_or_else(|| FcotError::UnknownTemplate(id.to_string()))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.templates.keys().map(String::as_str)
    }

    pub fn render(&self, id: &str, slots: &BTreeMap<String, String>) -> Result<Vec<PromptMessage>, FcotError> {
        render_prompt(self.get(id)?, slots, true)
    }
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::builtin()
    }
}
