//! Prompt construction for every stage of the pipeline, plus the parsers
//! that pull structured fields back out of LLM replies.
//!
//! Templates are plain text files with `{placeholder}` slots. Built-in copies
//! are compiled in; a prompt directory with the same file names overrides
//! them at runtime. In-context examples live in `icl/<kind>.json`.

pub mod parse;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::Message;
use crate::domain::{choice_letter, Problem, Reasoning, VisualClue, VisualFactor};

pub use parse::{parse_response, ParseMiss, Parsed};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    InitialReasoning,
    ConfidenceCheck,
    Classification,
    DeclarativeTransform,
    FactorGeneration,
    ClueHypotheses,
    FinalReasoning,
}

impl PromptKind {
    pub const ALL: [PromptKind; 7] = [
        PromptKind::InitialReasoning,
        PromptKind::ConfidenceCheck,
        PromptKind::Classification,
        PromptKind::DeclarativeTransform,
        PromptKind::FactorGeneration,
        PromptKind::ClueHypotheses,
        PromptKind::FinalReasoning,
    ];

    pub fn file_stem(&self) -> &'static str {
        match self {
            PromptKind::InitialReasoning => "initial_reasoning",
            PromptKind::ConfidenceCheck => "confidence_check",
            PromptKind::Classification => "classification",
            PromptKind::DeclarativeTransform => "declarative_transform",
            PromptKind::FactorGeneration => "factor_generation",
            PromptKind::ClueHypotheses => "clue_hypotheses",
            PromptKind::FinalReasoning => "final_reasoning",
        }
    }

    /// The output-format line repeated in the retry reminder.
    pub fn format_instruction(&self) -> &'static str {
        match self {
            PromptKind::InitialReasoning | PromptKind::FinalReasoning => {
                "End your reply with a final line of the form \"Answer: <letter>\"."
            }
            PromptKind::ConfidenceCheck => {
                "End your reply with a final line of the form \"Confidence: <high|low>\"."
            }
            PromptKind::Classification => {
                "End your reply with a final line of the form \"Category: <VCU|VCI>\"."
            }
            PromptKind::DeclarativeTransform => {
                "Write exactly one line per choice of the form \"Choice <letter>: <sentence>\"."
            }
            PromptKind::FactorGeneration => {
                "Reply with a numbered list, one factor per line (\"1. <factor>\")."
            }
            PromptKind::ClueHypotheses => {
                "For each factor write \"Factor <number>: <factor>\" followed by one line per choice \"Choice <letter>: <observation>\"."
            }
        }
    }
}

impl fmt::Display for PromptKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.file_stem())
    }
}

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("{kind} prompt needs context field `{field}`")]
    MissingContextField { kind: PromptKind, field: &'static str },
    #[error("in-context examples for {kind}: {reason}")]
    IclParseError { kind: PromptKind, reason: String },
    #[error("{kind} needs {needed} in-context examples but only {available} are available")]
    InsufficientExamples {
        kind: PromptKind,
        needed: usize,
        available: usize,
    },
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IclExample {
    pub question: String,
    pub answer_text: String,
}

/// How many in-context examples each prompt kind carries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct IclConfig {
    pub counts: BTreeMap<PromptKind, usize>,
}

impl Default for IclConfig {
    fn default() -> Self {
        Self {
            counts: BTreeMap::from([
                (PromptKind::Classification, 6),
                (PromptKind::FactorGeneration, 1),
                (PromptKind::ClueHypotheses, 3),
                (PromptKind::DeclarativeTransform, 2),
            ]),
        }
    }
}

impl IclConfig {
    pub fn count(&self, kind: PromptKind) -> usize {
        self.counts.get(&kind).copied().unwrap_or(0)
    }
}

/// Everything a template may draw on. Which fields are required depends on
/// the kind; see [`build_prompt`].
#[derive(Debug, Clone, Copy)]
pub struct PromptContext<'a> {
    pub problem: &'a Problem,
    pub caption: Option<&'a str>,
    pub prior_reasoning: Option<&'a Reasoning>,
    pub factors: Option<&'a [VisualFactor]>,
    pub clues: Option<&'a [VisualClue]>,
}

impl<'a> PromptContext<'a> {
    pub fn new(problem: &'a Problem) -> Self {
        Self {
            problem,
            caption: None,
            prior_reasoning: None,
            factors: None,
            clues: None,
        }
    }

    pub fn caption(mut self, caption: &'a str) -> Self {
        self.caption = Some(caption);
        self
    }

    pub fn reasoning(mut self, r: &'a Reasoning) -> Self {
        self.prior_reasoning = Some(r);
        self
    }

    pub fn factors(mut self, f: &'a [VisualFactor]) -> Self {
        self.factors = Some(f);
        self
    }

    pub fn clues(mut self, c: &'a [VisualClue]) -> Self {
        self.clues = Some(c);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Template {
    system: String,
    task: String,
}

macro_rules! builtin {
    ($stem:literal) => {
        (
            include_str!(concat!("../../assets/prompts/", $stem, ".system.txt")),
            include_str!(concat!("../../assets/prompts/", $stem, ".task.txt")),
            include_str!(concat!("../../assets/prompts/icl/", $stem, ".json")),
        )
    };
    ($stem:literal, no_icl) => {
        (
            include_str!(concat!("../../assets/prompts/", $stem, ".system.txt")),
            include_str!(concat!("../../assets/prompts/", $stem, ".task.txt")),
            "[]",
        )
    };
}

fn builtin_sources(kind: PromptKind) -> (&'static str, &'static str, &'static str) {
    match kind {
        PromptKind::InitialReasoning => builtin!("initial_reasoning", no_icl),
        PromptKind::ConfidenceCheck => builtin!("confidence_check", no_icl),
        PromptKind::Classification => builtin!("classification"),
        PromptKind::DeclarativeTransform => builtin!("declarative_transform"),
        PromptKind::FactorGeneration => builtin!("factor_generation"),
        PromptKind::ClueHypotheses => builtin!("clue_hypotheses"),
        PromptKind::FinalReasoning => builtin!("final_reasoning", no_icl),
    }
}

/// Parses an ICL example list; the file order is kept as the prompt order.
pub fn parse_icl_examples(kind: PromptKind, text: &str) -> Result<Vec<IclExample>, PromptError> {
    let examples: Vec<IclExample> =
        serde_json::from_str(text).map_err(|e| PromptError::IclParseError {
            kind,
            reason: e.to_string(),
        })?;
    if let Some(i) = examples
        .iter()
        .position(|e| e.question.trim().is_empty() || e.answer_text.trim().is_empty())
    {
        return Err(PromptError::IclParseError {
            kind,
            reason: format!("example {i} has an empty field"),
        });
    }
    Ok(examples)
}

/// Loads `count` examples (the first ones in file order).
pub fn load_icl_examples(
    kind: PromptKind,
    path: impl AsRef<Path>,
    count: usize,
) -> Result<Vec<IclExample>, PromptError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| PromptError::Io {
        path: path.display().to_string(),
        source,
    })?;
    take_examples(kind, parse_icl_examples(kind, &text)?, count)
}

fn take_examples(
    kind: PromptKind,
    mut examples: Vec<IclExample>,
    count: usize,
) -> Result<Vec<IclExample>, PromptError> {
    if examples.len() < count {
        return Err(PromptError::InsufficientExamples {
            kind,
            needed: count,
            available: examples.len(),
        });
    }
    examples.truncate(count);
    Ok(examples)
}

/// Templates and in-context examples for every prompt kind, read-only after load.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptLibrary {
    templates: BTreeMap<PromptKind, Template>,
    icl: BTreeMap<PromptKind, Vec<IclExample>>,
}

impl PromptLibrary {
    pub fn builtin(cfg: &IclConfig) -> Result<Self, PromptError> {
        Self::load(None, cfg)
    }

    /// Files present in `dir` replace the built-in ones of the same name.
    pub fn load(dir: Option<&Path>, cfg: &IclConfig) -> Result<Self, PromptError> {
        let read = |name: String, fallback: &str| -> Result<String, PromptError> {
            match dir.map(|d| d.join(&name)) {
                Some(path) if path.exists() => {
                    std::fs::read_to_string(&path).map_err(|source| PromptError::Io {
                        path: path.display().to_string(),
                        source,
                    })
                }
                _ => Ok(fallback.to_string()),
            }
        };
        let mut templates = BTreeMap::new();
        let mut icl = BTreeMap::new();
        for kind in PromptKind::ALL {
            let (system, task, examples) = builtin_sources(kind);
            let stem = kind.file_stem();
            templates.insert(
                kind,
                Template {
                    system: read(format!("{stem}.system.txt"), system)?.trim_end().to_string(),
                    task: read(format!("{stem}.task.txt"), task)?.trim_end().to_string(),
                },
            );
            let examples = read(format!("icl/{stem}.json"), examples)?;
            let examples = take_examples(kind, parse_icl_examples(kind, &examples)?, cfg.count(kind))?;
            icl.insert(kind, examples);
        }
        Ok(Self { templates, icl })
    }

    pub fn examples(&self, kind: PromptKind) -> &[IclExample] {
        self.icl.get(&kind).map(Vec::as_slice).unwrap_or(&[])
    }

    /// System instruction, then each example as a user/assistant pair, then the task.
    pub fn build_prompt(&self, kind: PromptKind, ctx: &PromptContext<'_>) -> Result<Vec<Message>, PromptError> {
        let template = &self.templates[&kind];
        let task = render(&template.task, &slots(kind, ctx)?);
        let mut messages = Vec::with_capacity(2 + 2 * self.examples(kind).len());
        messages.push(Message::system(template.system.clone()));
        for ex in self.examples(kind) {
            messages.push(Message::user(ex.question.clone()));
            messages.push(Message::assistant(ex.answer_text.clone()));
        }
        messages.push(Message::user(task));
        Ok(messages)
    }
}

pub const REMINDER_PREFIX: &str = "Your previous reply did not follow the required output format.";

/// Extends a conversation after a parse miss so the model can try again.
/// The reminder restates the task so it stands on its own.
pub fn with_format_reminder(kind: PromptKind, mut messages: Vec<Message>, bad_reply: &str) -> Vec<Message> {
    let task = messages.last().map(|m| m.content.clone()).unwrap_or_default();
    messages.push(Message::assistant(bad_reply.to_string()));
    messages.push(Message::user(format!(
        "{REMINDER_PREFIX} {}\n\n{task}",
        kind.format_instruction()
    )));
    messages
}

pub fn render_choices(choices: &[String]) -> String {
    choices
        .iter()
        .enumerate()
        .map(|(i, c)| format!("{}. {}", choice_letter(i), c))
        .collect::<Vec<_>>()
        .join("\n")
}

fn render_factors(factors: &[VisualFactor]) -> String {
    factors
        .iter()
        .enumerate()
        .map(|(n, f)| format!("{}. {}", n + 1, f.description))
        .collect::<Vec<_>>()
        .join("\n")
}

fn render_clues(clues: &[VisualClue]) -> String {
    if clues.is_empty() {
        return "(none)".into();
    }
    clues
        .iter()
        .map(|c| format!("- {}", c.text))
        .collect::<Vec<_>>()
        .join("\n")
}

fn slots(kind: PromptKind, ctx: &PromptContext<'_>) -> Result<Vec<(&'static str, String)>, PromptError> {
    let missing = |field| PromptError::MissingContextField { kind, field };
    let p = ctx.problem;
    let mut out = vec![
        ("question", p.question.clone()),
        ("choices", render_choices(&p.choices)),
    ];
    let needs_caption = matches!(
        kind,
        PromptKind::InitialReasoning | PromptKind::ConfidenceCheck | PromptKind::FinalReasoning
    );
    match ctx.caption {
        Some(c) => out.push(("caption", c.to_string())),
        None if needs_caption => return Err(missing("caption")),
        None => out.push(("caption", "(not available)".into())),
    }
    if kind == PromptKind::ConfidenceCheck {
        let r = ctx.prior_reasoning.ok_or_else(|| missing("prior_reasoning"))?;
        out.push(("reasoning", r.raw_text.trim().to_string()));
    }
    if kind == PromptKind::ClueHypotheses {
        let f = ctx.factors.ok_or_else(|| missing("factors"))?;
        out.push(("factors", render_factors(f)));
    }
    if kind == PromptKind::FinalReasoning {
        let c = ctx.clues.ok_or_else(|| missing("clues"))?;
        out.push(("clues", render_clues(c)));
    }
    Ok(out)
}

/// Single-pass `{name}` substitution; unknown slots are left untouched.
fn render(template: &str, slots: &[(&'static str, String)]) -> String {
    let mut out = String::with_capacity(template.len() + 256);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) => {
                let name = &after[..close];
                match slots.iter().find(|(k, _)| *k == name) {
                    Some((_, v)) => out.push_str(v),
                    None => {
                        out.push('{');
                        out.push_str(name);
                        out.push('}');
                    }
                }
                rest = &after[close + 1..];
            }
            None => {
                out.push_str(&rest[open..]);
                rest = "";
            }
        }
    }
    out.push_str(rest);
    out
}
