//! Core data model shared by the backends, prompt, pipeline and harness layers.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ValidationError {
    #[error("problem {id}: field `choices` is empty or contains an empty string")]
    EmptyChoices { id: String },
    #[error("problem {id}: field `gold` = {gold} is out of range for {n_choices} choices")]
    BadGoldIndex {
        id: String,
        gold: usize,
        n_choices: usize,
    },
    #[error("problem {id}: field `persons[{index}]` has coordinates outside [0, 1]")]
    BadBoxCoordinates { id: String, index: usize },
}

/// Hex SHA-256 of arbitrary bytes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageLocator {
    Path(PathBuf),
    /// Inline bytes, base64 encoded on the wire.
    Bytes(#[serde(with = "b64")] Vec<u8>),
}

mod b64 {
    use base64::Engine as _;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&base64::engine::general_purpose::STANDARD.encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        base64::engine::general_purpose::STANDARD
            .decode(s)
            .map_err(serde::de::Error::custom)
    }
}

/// An image plus the digest of its bytes. The digest is what the cache and
/// the fixtures key on; the bytes are only ever forwarded to backends.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub locator: ImageLocator,
    pub digest: String,
}

impl ImageRef {
    pub fn from_bytes(bytes: Vec<u8>) -> Self {
        let digest = sha256_hex(&bytes);
        Self {
            locator: ImageLocator::Bytes(bytes),
            digest,
        }
    }

    /// Reads the file once to compute the digest; the bytes are re-read on demand.
    pub fn from_path(path: impl Into<PathBuf>) -> std::io::Result<Self> {
        let path = path.into();
        let bytes = std::fs::read(&path)?;
        Ok(Self {
            digest: sha256_hex(&bytes),
            locator: ImageLocator::Path(path),
        })
    }

    pub fn bytes(&self) -> std::io::Result<Vec<u8>> {
        match &self.locator {
            ImageLocator::Path(p) => std::fs::read(p),
            ImageLocator::Bytes(b) => Ok(b.clone()),
        }
    }

    pub fn base64(&self) -> std::io::Result<String> {
        Ok(base64::engine::general_purpose::STANDARD.encode(self.bytes()?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonBox {
    pub x_center: f64,
    pub y_center: f64,
    /// The dataset's person token as it appears in the text, e.g. `[person1]`.
    pub original_tag: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Problem {
    pub id: String,
    pub image: ImageRef,
    pub question: String,
    pub choices: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub persons: Option<Vec<PersonBox>>,
}

/// Checks every invariant of a raw problem and hands it back unchanged.
pub fn validate_problem(raw: Problem) -> Result<Problem, ValidationError> {
    if raw.choices.is_empty() || raw.choices.iter().any(|c| c.trim().is_empty()) {
        return Err(ValidationError::EmptyChoices { id: raw.id });
    }
    if let Some(gold) = raw.gold {
        if gold >= raw.choices.len() {
            return Err(ValidationError::BadGoldIndex {
                id: raw.id,
                gold,
                n_choices: raw.choices.len(),
            });
        }
    }
    if let Some(persons) = &raw.persons {
        let unit = 0.0..=1.0;
        if let Some(index) = persons
            .iter()
            .position(|b| !unit.contains(&b.x_center) || !unit.contains(&b.y_center))
        {
            return Err(ValidationError::BadBoxCoordinates { id: raw.id, index });
        }
    }
    Ok(raw)
}

/// Letter used for a choice in prompts (`0 -> 'A'`).
pub fn choice_letter(index: usize) -> char {
    debug_assert!(index < 26);
    (b'A' + index as u8) as char
}

pub fn letter_index(letter: char) -> Option<usize> {
    let up = letter.to_ascii_uppercase();
    up.is_ascii_uppercase().then(|| (up as u8 - b'A') as usize)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    /// Visual commonsense understanding: does a statement match the image.
    #[serde(rename = "VCU")]
    Vcu,
    /// Visual commonsense inference: plausibility given observations.
    #[serde(rename = "VCI")]
    Vci,
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Category::Vcu => "VCU",
            Category::Vci => "VCI",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Confidence {
    Confident,
    NotConfident,
}

impl fmt::Display for Confidence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Confidence::Confident => "Conf",
            Confidence::NotConfident => "!Conf",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reasoning {
    pub raw_text: String,
    pub answer: Option<usize>,
    pub rationale: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeclarativeStatement {
    pub choice_index: usize,
    pub statement: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisualFactor {
    pub index: usize,
    pub description: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ClueOrigin {
    LlmHypothesis,
    VqaAnswer,
    Selected,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisualClue {
    pub factor_index: usize,
    /// Present iff `source` is `LlmHypothesis`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choice_index: Option<usize>,
    pub text: String,
    pub source: ClueOrigin,
}

/// Raw aligner output for one text, plus `combined = itm + itc` with no rescaling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentScore {
    pub itm: f64,
    pub itc: f64,
    pub combined: f64,
}

impl AlignmentScore {
    pub fn new(itm: f64, itc: f64) -> Self {
        Self {
            itm,
            itc,
            combined: itm + itc,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Strategy {
    /// Aligner scores declarative statements.
    Blip2Orig,
    /// Aligner scores LLM clue hypotheses, averaged per choice.
    Blip2LlmClue,
    /// LLM reasons over the caption.
    LlmCaption,
    LlmCaptionVqaClue,
    LlmCaptionLlmClue,
    /// Confidence gate, classification, then the category's branch.
    VicorFull,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Blip2Orig,
        Strategy::Blip2LlmClue,
        Strategy::LlmCaption,
        Strategy::LlmCaptionVqaClue,
        Strategy::LlmCaptionLlmClue,
        Strategy::VicorFull,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::Blip2Orig => "BLIP2_ORIG",
            Strategy::Blip2LlmClue => "BLIP2_LLM_CLUE",
            Strategy::LlmCaption => "LLM_CAPTION",
            Strategy::LlmCaptionVqaClue => "LLM_CAPTION_VQA_CLUE",
            Strategy::LlmCaptionLlmClue => "LLM_CAPTION_LLM_CLUE",
            Strategy::VicorFull => "VICOR_FULL",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == norm)
            .ok_or_else(|| format!("unknown strategy `{s}`"))
    }
}

/// Where VCI clues come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ClueSource {
    #[default]
    Llm,
    Vqa,
}

impl fmt::Display for ClueSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClueSource::Llm => "LLM",
            ClueSource::Vqa => "VQA",
        })
    }
}

impl FromStr for ClueSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "LLM" => Ok(ClueSource::Llm),
            "VQA" => Ok(ClueSource::Vqa),
            _ => Err(format!("unknown clue source `{s}`")),
        }
    }
}

/// What a trace step was for. Several kinds share a backend capability.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Caption,
    InitialReasoning,
    ConfidenceCheck,
    Classification,
    DeclarativeTransform,
    FactorGeneration,
    ClueHypotheses,
    FinalReasoning,
    /// Align call over one statement per choice.
    ChoiceAlignment,
    /// Align call over one factor's per-choice hypotheses.
    ClueAlignment,
    VqaClue,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestKind {
    Chat,
    Caption,
    Vqa,
    Align,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub kind: StepKind,
    pub backend: RequestKind,
    pub request_digest: String,
    /// Text for chat/caption/vqa; JSON score list for align.
    pub response: serde_json::Value,
    /// Set on the second attempt of a prompt after a parse miss.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub retry: bool,
    /// Set when the parsed value came from the deterministic fallback.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub fallback: bool,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub problem_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
    pub strategy: Strategy,
    pub clue_source: ClueSource,
    pub steps: Vec<TraceStep>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<Confidence>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<Category>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub clues: Vec<VisualClue>,
    pub answer: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Trace {
    pub fn count(&self, backend: RequestKind) -> usize {
        self.steps.iter().filter(|s| s.backend == backend).count()
    }

    pub fn count_kind(&self, kind: StepKind) -> usize {
        self.steps.iter().filter(|s| s.kind == kind).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub answer: usize,
    pub strategy_used: Strategy,
    pub trace: Trace,
}
