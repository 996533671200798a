//! Authoring helpers for fixture files: script the replies a problem should
//! receive at each stage and emit the matching fixture entries.
//!
//! Chat replies are keyed by `pattern:` globs on the task header and the
//! question line, so they are independent of template wording below the
//! header and of the in-context examples. Caption, VQA and align replies are
//! keyed by exact request digest.

use crate::backends::fixture::{FixtureParseError, PATTERN_PREFIX};
use crate::backends::{cache_key, BackendRequest, BackendResponse, FixtureBackend, RawScore};
use crate::domain::Problem;
use crate::prompts::{PromptKind, REMINDER_PREFIX};

/// First line of each built-in task template.
pub fn task_header(kind: PromptKind) -> &'static str {
    match kind {
        PromptKind::InitialReasoning => "Task: answer the question.",
        PromptKind::ConfidenceCheck => "Task: judge confidence.",
        PromptKind::Classification => "Task: classify the question.",
        PromptKind::DeclarativeTransform => "Task: rewrite as statements.",
        PromptKind::FactorGeneration => "Task: list visual factors.",
        PromptKind::ClueHypotheses => "Task: hypothesize visual clues.",
        PromptKind::FinalReasoning => "Task: answer the question using visual clues.",
    }
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub problem: Problem,
    pub caption: String,
    replies: Vec<(PromptKind, bool, String)>,
    aligns: Vec<(Vec<String>, Vec<RawScore>)>,
    vqas: Vec<(String, String)>,
}

impl Scenario {
    pub fn new(problem: Problem, caption: impl Into<String>) -> Self {
        Self {
            problem,
            caption: caption.into(),
            replies: Vec::new(),
            aligns: Vec::new(),
            vqas: Vec::new(),
        }
    }

    pub fn reply(mut self, kind: PromptKind, text: impl Into<String>) -> Self {
        self.replies.push((kind, false, text.into()));
        self
    }

    /// Reply to the second attempt, after a format reminder.
    pub fn retry_reply(mut self, kind: PromptKind, text: impl Into<String>) -> Self {
        self.replies.push((kind, true, text.into()));
        self
    }

    pub fn align(mut self, texts: &[&str], scores: &[(f64, f64)]) -> Self {
        self.aligns.push((
            texts.iter().map(|t| t.to_string()).collect(),
            scores.iter().map(|&(itm, itc)| RawScore { itm, itc }).collect(),
        ));
        self
    }

    pub fn vqa(mut self, question: impl Into<String>, answer: impl Into<String>) -> Self {
        self.vqas.push((question.into(), answer.into()));
        self
    }

    fn chat_pattern(&self, kind: PromptKind, retry: bool) -> String {
        let header = task_header(kind);
        let q = &self.problem.question;
        // Tasks that open with the question put it right after the header.
        let body = match kind {
            PromptKind::Classification | PromptKind::DeclarativeTransform | PromptKind::ClueHypotheses => {
                format!("{header}\nQuestion: {q}\n*")
            }
            _ => format!("{header}\n*Question: {q}\n*"),
        };
        if retry {
            format!("{PATTERN_PREFIX}{REMINDER_PREFIX}*{body}")
        } else {
            format!("{PATTERN_PREFIX}{body}")
        }
    }

    pub fn entries(&self) -> Vec<(String, BackendResponse)> {
        let digest = &self.problem.image.digest;
        let mut out = vec![(
            cache_key(&BackendRequest::Caption {
                image_digest: digest.clone(),
            }),
            BackendResponse::Text(self.caption.clone()),
        )];
        for (kind, retry, text) in &self.replies {
            out.push((self.chat_pattern(*kind, *retry), BackendResponse::Text(text.clone())));
        }
        for (texts, scores) in &self.aligns {
            let req = BackendRequest::Align {
                image_digest: digest.clone(),
                texts: texts.clone(),
            };
            out.push((cache_key(&req), BackendResponse::Scores(scores.clone())));
        }
        for (question, answer) in &self.vqas {
            let req = BackendRequest::Vqa {
                image_digest: digest.clone(),
                question: question.clone(),
            };
            out.push((cache_key(&req), BackendResponse::Text(answer.clone())));
        }
        out
    }
}

/// Entries of several scenarios; the same request scripted twice is kept once
/// when the responses agree.
pub fn merged_entries(scenarios: &[Scenario]) -> Vec<(String, BackendResponse)> {
    let mut out: Vec<(String, BackendResponse)> = Vec::new();
    for (k, v) in scenarios.iter().flat_map(Scenario::entries) {
        if !out.iter().any(|(ek, ev)| *ek == k && *ev == v) {
            out.push((k, v));
        }
    }
    out
}

pub fn fixture_backend(scenarios: &[Scenario]) -> Result<FixtureBackend, FixtureParseError> {
    FixtureBackend::from_entries(merged_entries(scenarios))
}

/// Fixture file text, entries in scenario order.
pub fn fixture_json(scenarios: &[Scenario]) -> String {
    let body: Vec<String> = merged_entries(scenarios)
        .into_iter()
        .map(|(k, v)| {
            format!(
                "  {}: {}",
                serde_json::to_string(&k).expect("string"),
                serde_json::to_string(&v).expect("response")
            )
        })
        .collect();
    format!("{{\n{}\n}}\n", body.join(",\n"))
}
