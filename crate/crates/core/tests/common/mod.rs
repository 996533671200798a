#![allow(dead_code)]

use std::sync::Arc;

use vicor_core::backends::{Backend, Backends, FixtureBackend, RecordingBackend};
use vicor_core::domain::{ImageRef, Problem};
use vicor_core::prompts::{IclConfig, PromptKind, PromptLibrary};
use vicor_core::scenario::{fixture_backend, Scenario};

pub fn problem(id: &str, question: &str, choices: &[&str], gold: Option<usize>) -> Problem {
    Problem {
        id: id.into(),
        image: ImageRef::from_bytes(format!("image-bytes-{id}").into_bytes()),
        question: question.into(),
        choices: choices.iter().map(|s| s.to_string()).collect(),
        gold,
        persons: None,
    }
}

pub fn library() -> PromptLibrary {
    PromptLibrary::builtin(&IclConfig::default()).unwrap()
}

pub struct Harness {
    pub recorder: Arc<RecordingBackend>,
    pub backends: Backends,
}

pub fn backends_for(scenarios: &[Scenario]) -> Harness {
    let fx: FixtureBackend = fixture_backend(scenarios).unwrap();
    let recorder = Arc::new(RecordingBackend::new(Arc::new(fx)));
    let backends = Backends::new(recorder.clone() as Arc<dyn Backend>);
    Harness { recorder, backends }
}

/// Windy-field scene: the weather decides between the choices.
pub fn horses() -> Problem {
    problem(
        "horses",
        "Why is the grass swaying?",
        &["wind", "rain", "snow", "still wind"],
        Some(0),
    )
}

pub const HORSE_CAPTION: &str = "two horses on a grassy field";

/// Confident path: caption, initial reasoning, confidence.
pub fn confident(p: Problem, answer_letter: char) -> Scenario {
    Scenario::new(p, "a scene")
        .reply(PromptKind::InitialReasoning, format!("Reasoning.\nAnswer: {answer_letter}"))
        .reply(PromptKind::ConfidenceCheck, "Confidence: high")
        .reply(PromptKind::Classification, "Category: VCU")
}

/// Not confident, VCU: statements `S<i>` with combined score peaking at `best`.
pub fn vcu(p: Problem, best: usize) -> Scenario {
    let n = p.choices.len();
    let statements: Vec<String> = (0..n).map(|i| format!("Statement {} for {}.", i, p.id)).collect();
    let lines: Vec<String> = statements
        .iter()
        .enumerate()
        .map(|(i, s)| format!("Choice {}: {}", (b'A' + i as u8) as char, s))
        .collect();
    let refs: Vec<&str> = statements.iter().map(String::as_str).collect();
    let scores: Vec<(f64, f64)> = (0..n)
        .map(|i| if i == best { (0.9, 0.4) } else { (0.1, 0.2) })
        .collect();
    Scenario::new(p, "a scene")
        .reply(PromptKind::InitialReasoning, "Hmm.\nAnswer: A")
        .reply(PromptKind::ConfidenceCheck, "Confidence: low")
        .reply(PromptKind::Classification, "Category: VCU")
        .reply(PromptKind::DeclarativeTransform, lines.join("\n"))
        .align(&refs, &scores)
}

/// Not confident, VCI with `factors` factors; LLM clues favor `best`, final
/// reasoning answers `final_letter`; VQA clues also scripted.
pub fn vci(p: Problem, factors: usize, best: usize, final_letter: char) -> Scenario {
    let n = p.choices.len();
    let factor_list: Vec<String> = (0..factors).map(|j| format!("{}. factor {} of {}", j + 1, j, p.id)).collect();
    let mut hyp_lines = Vec::new();
    let mut s = Scenario::new(p.clone(), "a scene")
        .reply(PromptKind::InitialReasoning, "Unsure.\nAnswer: B")
        .reply(PromptKind::ConfidenceCheck, "Confidence: low")
        .reply(PromptKind::Classification, "Category: VCI")
        .reply(PromptKind::FactorGeneration, factor_list.join("\n"))
        .reply(PromptKind::FinalReasoning, format!("With clues.\nAnswer: {final_letter}"));
    for j in 0..factors {
        hyp_lines.push(format!("Factor {}: factor {} of {}", j + 1, j, p.id));
        let texts: Vec<String> = (0..n).map(|i| format!("Clue {j}-{i} for {}.", p.id)).collect();
        for (i, t) in texts.iter().enumerate() {
            hyp_lines.push(format!("Choice {}: {}", (b'A' + i as u8) as char, t));
        }
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let scores: Vec<(f64, f64)> = (0..n)
            .map(|i| if i == best { (0.8, 0.3) } else { (0.2, 0.1) })
            .collect();
        s = s
            .align(&refs, &scores)
            .vqa(format!("What is factor {j} of {}?", p.id), format!("observation {j}"));
    }
    s.reply(PromptKind::ClueHypotheses, hyp_lines.join("\n"))
}
