//! Tag grammars for LLM replies and the deterministic fallbacks used when a
//! reply still does not parse after one retry.

use std::collections::{BTreeMap, HashSet};
use std::sync::LazyLock;

use regex::Regex;
use thiserror::Error;

use super::PromptKind;
use crate::domain::{letter_index, Category, Confidence, Problem};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("could not parse a {kind} reply")]
pub struct ParseMiss {
    pub kind: PromptKind,
}

/// Factor index -> (choice index -> statement), both zero-based.
pub type ClueTable = BTreeMap<usize, BTreeMap<usize, String>>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Parsed {
    Answer(usize),
    Confidence(Confidence),
    Category(Category),
    Factors(Vec<String>),
    ClueHypotheses(ClueTable),
    Statements(Vec<String>),
}

static ANSWER_TAG: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)\banswer\b[*_\s]*(?:is\b)?[*_\s]*[:：=\-]?[ \t*_]*([^\n]*)").unwrap()
});
static CONFIDENCE_TAG: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)\bconfidence\b(?:\s+level)?[*_\s]*(?:is\b)?[*_\s]*[:：=\-]?[*_\s]*(high|low)\b").unwrap()
});
static CATEGORY_TAG: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?i)\bcategory\b[*_\s]*(?:is\b)?[*_\s]*[:：=\-]?[*_\s]*(vcu|vci|visual commonsense understanding|visual commonsense inference)\b",
    )
    .unwrap()
});
static LIST_ITEM: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\s*(?:\d+\s*[.):]|[-*•])\s+(.+?)\s*$").unwrap());
static FACTOR_HEADER: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)^\s*[#*_\s]*factor\s*(\d+)[*_]*\s*[:.)\-]?\s*(.*)$").unwrap()
});
static CHOICE_LINE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^\s*[-*_\s]*(?:(?i:choice)\s*)?\(?([A-Za-z])\)?[*_]*\s*[:.)\-]\s*(.+?)\s*$").unwrap()
});
static WORD: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"[a-z0-9]+").unwrap());

fn strip_markup(s: &str) -> &str {
    s.trim_matches(|c: char| c.is_whitespace() || matches!(c, '*' | '_' | '`' | '"' | '\'' | '“' | '”'))
}

fn normalize(s: &str) -> String {
    strip_markup(s)
        .trim_end_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace())
        .to_lowercase()
}

/// Resolves the payload after an `Answer:` tag to a choice index.
fn resolve_answer(payload: &str, choices: &[String]) -> Option<usize> {
    let p = strip_markup(payload).trim_start_matches(['(', '[']);
    let mut chars = p.chars();
    if let Some(first) = chars.next() {
        let rest = chars.as_str();
        let next = rest.chars().next();
        let bounded = next.is_none_or(|c| !c.is_alphanumeric());
        // Lowercase letters only count when they stand alone ("a dog" is not "A").
        let alone = rest
            .trim_start_matches([')', ']', '.', ':', '*', '_'])
            .trim()
            .is_empty();
        if first.is_ascii_alphabetic() && bounded && (first.is_ascii_uppercase() || alone) {
            if let Some(i) = letter_index(first).filter(|&i| i < choices.len()) {
                return Some(i);
            }
        }
    }
    let norm = normalize(p);
    if norm.is_empty() {
        return None;
    }
    choices.iter().position(|c| normalize(c) == norm)
}

pub fn parse_answer(text: &str, choices: &[String]) -> Option<usize> {
    let tags: Vec<_> = ANSWER_TAG.captures_iter(text).collect();
    tags.iter()
        .rev()
        .find_map(|c| resolve_answer(c.get(1).map_or("", |m| m.as_str()), choices))
}

pub fn parse_confidence(text: &str) -> Option<Confidence> {
    CONFIDENCE_TAG.captures_iter(text).last().map(|c| {
        if c[1].eq_ignore_ascii_case("high") {
            Confidence::Confident
        } else {
            Confidence::NotConfident
        }
    })
}

pub fn parse_category(text: &str) -> Option<Category> {
    CATEGORY_TAG.captures_iter(text).last().map(|c| {
        let v = c[1].to_ascii_lowercase();
        if v == "vcu" || v.ends_with("understanding") {
            Category::Vcu
        } else {
            Category::Vci
        }
    })
}

/// Numbered (or bulleted) items, deduplicated case-insensitively.
pub fn parse_factors(text: &str) -> Option<Vec<String>> {
    let mut seen = HashSet::new();
    let factors: Vec<String> = text
        .lines()
        .filter_map(|l| LIST_ITEM.captures(l))
        .map(|c| normalize_item(&c[1]))
        .filter(|f| !f.is_empty() && seen.insert(f.to_lowercase()))
        .collect();
    (!factors.is_empty()).then_some(factors)
}

fn normalize_item(s: &str) -> String {
    strip_markup(s).trim_end_matches(['.', ';', ',']).trim().to_string()
}

/// `Factor N:` headers open a group; `Choice X:` lines fill it. Choice lines
/// before any header belong to the first factor. The first statement per
/// (factor, choice) wins.
pub fn parse_clue_hypotheses(text: &str, n_choices: usize) -> Option<ClueTable> {
    let mut table = ClueTable::new();
    let mut current = 0usize;
    for line in text.lines() {
        if let Some(h) = FACTOR_HEADER.captures(line) {
            if let Ok(n) = h[1].parse::<usize>() {
                current = n.saturating_sub(1);
                continue;
            }
        }
        let Some(c) = CHOICE_LINE.captures(line) else {
            continue;
        };
        let letter = c[1].chars().next().expect("regex captured one letter");
        let Some(choice) = letter_index(letter).filter(|&i| i < n_choices) else {
            continue;
        };
        let statement = strip_markup(&c[2]).to_string();
        if statement.is_empty() {
            continue;
        }
        table.entry(current).or_default().entry(choice).or_insert(statement);
    }
    (!table.is_empty()).then_some(table)
}

/// One statement per choice: lettered lines first, else exactly `n` plain lines.
pub fn parse_statements(text: &str, n_choices: usize) -> Option<Vec<String>> {
    let mut lettered: BTreeMap<usize, String> = BTreeMap::new();
    for line in text.lines() {
        if let Some(c) = CHOICE_LINE.captures(line) {
            let letter = c[1].chars().next().expect("regex captured one letter");
            if let Some(i) = letter_index(letter).filter(|&i| i < n_choices) {
                let s = strip_markup(&c[2]).to_string();
                if !s.is_empty() {
                    lettered.entry(i).or_insert(s);
                }
            }
        }
    }
    if lettered.len() == n_choices {
        return Some(lettered.into_values().collect());
    }
    let plain: Vec<String> = text
        .lines()
        .map(|l| match LIST_ITEM.captures(l) {
            Some(c) => strip_markup(&c[1]).to_string(),
            None => strip_markup(l).to_string(),
        })
        .filter(|l| !l.is_empty())
        .collect();
    (plain.len() == n_choices).then_some(plain)
}

pub fn parse_response(kind: PromptKind, text: &str, problem: &Problem) -> Result<Parsed, ParseMiss> {
    let miss = ParseMiss { kind };
    if text.trim().is_empty() {
        return Err(miss);
    }
    let n = problem.choices.len();
    let parsed = match kind {
        PromptKind::InitialReasoning | PromptKind::FinalReasoning => {
            parse_answer(text, &problem.choices).map(Parsed::Answer)
        }
        PromptKind::ConfidenceCheck => parse_confidence(text).map(Parsed::Confidence),
        PromptKind::Classification => parse_category(text).map(Parsed::Category),
        PromptKind::FactorGeneration => parse_factors(text).map(Parsed::Factors),
        PromptKind::ClueHypotheses => parse_clue_hypotheses(text, n).map(Parsed::ClueHypotheses),
        PromptKind::DeclarativeTransform => parse_statements(text, n).map(Parsed::Statements),
    };
    parsed.ok_or(miss)
}

/// Value used after the retry also missed.
pub fn fallback(kind: PromptKind, text: &str, problem: &Problem) -> Parsed {
    match kind {
        PromptKind::InitialReasoning | PromptKind::FinalReasoning => {
            Parsed::Answer(overlap_fallback(text, &problem.choices))
        }
        PromptKind::ConfidenceCheck => Parsed::Confidence(Confidence::NotConfident),
        PromptKind::Classification => Parsed::Category(Category::Vci),
        PromptKind::FactorGeneration => Parsed::Factors(Vec::new()),
        PromptKind::ClueHypotheses => Parsed::ClueHypotheses(ClueTable::new()),
        PromptKind::DeclarativeTransform => Parsed::Statements(
            problem
                .choices
                .iter()
                .map(|c| naive_statement(&problem.question, c))
                .collect(),
        ),
    }
}

/// Question with its question mark dropped, followed by the choice.
pub fn naive_statement(question: &str, choice: &str) -> String {
    format!("{} {}", question.trim().trim_end_matches('?').trim(), choice.trim())
}

const TAIL_CHARS: usize = 400;

fn words(s: &str) -> HashSet<String> {
    WORD.find_iter(&s.to_lowercase())
        .map(|m| m.as_str().to_string())
        .collect()
}

/// Choice sharing the most distinct words with the reply's tail; ties and
/// zero overlap resolve to the lowest index.
pub fn overlap_fallback(text: &str, choices: &[String]) -> usize {
    let start = text
        .char_indices()
        .rev()
        .nth(TAIL_CHARS - 1)
        .map_or(0, |(i, _)| i);
    let tail = words(&text[start..]);
    let mut best = (0usize, 0usize);
    for (i, c) in choices.iter().enumerate() {
        let overlap = words(c).intersection(&tail).count();
        if overlap > best.1 {
            best = (i, overlap);
        }
    }
    best.0
}
