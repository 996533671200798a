//! The routed decision procedure and the fixed ablation strategies.
//!
//! Every strategy starts the same way: caption, initial reasoning over the
//! caption, and a confidence check. The full policy stops there when the LLM
//! is confident; otherwise it classifies the problem and hands VCU problems
//! to the aligner (declarative statements, `itm + itc`) and VCI problems to
//! factor/clue elicitation followed by a second LLM reasoning pass. Fixed
//! strategies always classify (so their results can be bucketed) and then
//! follow their own path regardless of the gate.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, Backends, ChatParams, Message, Session};
use crate::domain::{
    AlignmentScore, Category, ClueOrigin, ClueSource, Confidence, Decision, ImageRef, Problem,
    Reasoning, StepKind, Strategy, Trace, VisualClue, VisualFactor,
};
use crate::prompts::parse::{fallback, overlap_fallback, ClueTable};
use crate::prompts::{parse_response, with_format_reminder, Parsed, PromptContext, PromptError, PromptKind, PromptLibrary};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("clue matrix is ragged: choice {choice} has {got} clues, expected {expected}")]
    RaggedClueMatrix {
        choice: usize,
        got: usize,
        expected: usize,
    },
    #[error("{0}")]
    Precondition(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub strategy: Strategy,
    pub clue_source: ClueSource,
    pub max_factors: usize,
    pub chat: ChatParams,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::VicorFull,
            clue_source: ClueSource::Llm,
            max_factors: 5,
            chat: ChatParams::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.max_factors == 0 {
            return Err(PipelineError::Precondition("max_factors must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ScoreMode {
    /// `S_i = itm_i + itc_i` over one text per choice.
    Sum,
    /// `S_i = (1/n) * sum_j (itm_ij + itc_ij)` over n clues per choice.
    ClueAvg,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax_lowest(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

pub fn sum_scores(scores: &[AlignmentScore]) -> Vec<f64> {
    scores.iter().map(|s| s.itm + s.itc).collect()
}

/// `matrix[i][j]` is the score of clue `j` for choice `i`.
pub fn clue_average(matrix: &[Vec<AlignmentScore>]) -> Result<Vec<f64>, PipelineError> {
    let expected = matrix.first().map_or(0, Vec::len);
    if let Some((choice, row)) = matrix
        .iter()
        .enumerate()
        .find(|(_, row)| row.len() != expected || row.is_empty())
    {
        return Err(PipelineError::RaggedClueMatrix {
            choice,
            got: row.len(),
            expected,
        });
    }
    Ok(matrix
        .iter()
        .map(|row| {
            let total = row.iter().map(|s| s.itm + s.itc).fold(None, |acc: Option<f64>, v| {
                Some(acc.map_or(v, |a| a + v))
            });
            total.unwrap_or(0.0) / row.len() as f64
        })
        .collect())
}

/// Scores per choice through the aligner. `texts[i]` are the texts of choice
/// `i`: exactly one for `Sum`, `n` (same for every choice) for `ClueAvg`.
/// `ClueAvg` issues one align call per clue column.
pub async fn score_choices(
    mode: ScoreMode,
    image: &ImageRef,
    texts: &[Vec<String>],
    session: &mut Session<'_>,
) -> Result<Vec<f64>, PipelineError> {
    match mode {
        ScoreMode::Sum => {
            if let Some(choice) = texts.iter().position(|t| t.len() != 1) {
                return Err(PipelineError::RaggedClueMatrix {
                    choice,
                    got: texts[choice].len(),
                    expected: 1,
                });
            }
            let flat: Vec<String> = texts.iter().map(|t| t[0].clone()).collect();
            let scores = session.align(StepKind::ChoiceAlignment, image, &flat).await?;
            Ok(sum_scores(&scores))
        }
        ScoreMode::ClueAvg => {
            let n = texts.first().map_or(0, Vec::len);
            if let Some((choice, row)) = texts
                .iter()
                .enumerate()
                .find(|(_, row)| row.len() != n || row.is_empty())
            {
                return Err(PipelineError::RaggedClueMatrix {
                    choice,
                    got: row.len(),
                    expected: n,
                });
            }
            let mut matrix = vec![Vec::with_capacity(n); texts.len()];
            for j in 0..n {
                let column: Vec<String> = texts.iter().map(|row| row[j].clone()).collect();
                let scores = session.align(StepKind::ClueAlignment, image, &column).await?;
                for (row, s) in matrix.iter_mut().zip(scores) {
                    row.push(s);
                }
            }
            clue_average(&matrix)
        }
    }
}

/// Aligns one factor's per-choice hypotheses and keeps the best match.
pub async fn select_clue(
    factor: &VisualFactor,
    hypotheses: &BTreeMap<usize, String>,
    image: &ImageRef,
    session: &mut Session<'_>,
) -> Result<VisualClue, PipelineError> {
    if hypotheses.is_empty() {
        return Err(PipelineError::Precondition(format!(
            "factor {} has no hypotheses",
            factor.index
        )));
    }
    let texts: Vec<String> = hypotheses.values().cloned().collect();
    let scores = session.align(StepKind::ClueAlignment, image, &texts).await?;
    let k = argmax_lowest(&sum_scores(&scores)).expect("non-empty scores");
    Ok(VisualClue {
        factor_index: factor.index,
        choice_index: None,
        text: texts[k].clone(),
        source: ClueOrigin::Selected,
    })
}

fn step_kind(kind: PromptKind) -> StepKind {
    match kind {
        PromptKind::InitialReasoning => StepKind::InitialReasoning,
        PromptKind::ConfidenceCheck => StepKind::ConfidenceCheck,
        PromptKind::Classification => StepKind::Classification,
        PromptKind::DeclarativeTransform => StepKind::DeclarativeTransform,
        PromptKind::FactorGeneration => StepKind::FactorGeneration,
        PromptKind::ClueHypotheses => StepKind::ClueHypotheses,
        PromptKind::FinalReasoning => StepKind::FinalReasoning,
    }
}

/// State of one problem's run.
struct Run<'a, 'b> {
    problem: &'a Problem,
    cfg: &'a PipelineConfig,
    prompts: &'a PromptLibrary,
    session: Session<'b>,
    confidence: Option<Confidence>,
    category: Option<Category>,
    clues: Vec<VisualClue>,
    last_text: String,
}

impl Run<'_, '_> {
    /// One chat call, one retry with a format reminder on a parse miss, then
    /// the kind's fallback.
    async fn ask(&mut self, kind: PromptKind, messages: Vec<Message>) -> Result<(Parsed, String), PipelineError> {
        let step = step_kind(kind);
        let text = self.session.chat(step, messages.clone(), &self.cfg.chat, false).await?;
        self.last_text = text.clone();
        if let Ok(p) = parse_response(kind, &text, self.problem) {
            return Ok((p, text));
        }
        let retry = with_format_reminder(kind, messages, &text);
        let text = self.session.chat(step, retry, &self.cfg.chat, true).await?;
        self.last_text = text.clone();
        match parse_response(kind, &text, self.problem) {
            Ok(p) => Ok((p, text)),
            Err(miss) => {
                tracing::debug!(problem = %self.problem.id, %miss, "using fallback");
                self.session.mark_fallback();
                Ok((fallback(kind, &text, self.problem), text))
            }
        }
    }

    async fn reason(&mut self, kind: PromptKind, ctx: PromptContext<'_>) -> Result<Reasoning, PipelineError> {
        let messages = self.prompts.build_prompt(kind, &ctx)?;
        let (parsed, text) = self.ask(kind, messages).await?;
        let Parsed::Answer(answer) = parsed else {
            unreachable!("reasoning prompts parse to answers")
        };
        Ok(Reasoning {
            rationale: text
                .lines()
                .filter(|l| !l.trim_start().to_ascii_lowercase().starts_with("answer"))
                .collect::<Vec<_>>()
                .join("\n")
                .trim()
                .to_string(),
            raw_text: text,
            answer: Some(answer),
        })
    }

    async fn confidence(&mut self, caption: &str, r1: &Reasoning) -> Result<Confidence, PipelineError> {
        let ctx = PromptContext::new(self.problem).caption(caption).reasoning(r1);
        let messages = self.prompts.build_prompt(PromptKind::ConfidenceCheck, &ctx)?;
        match self.ask(PromptKind::ConfidenceCheck, messages).await?.0 {
            Parsed::Confidence(c) => Ok(c),
            _ => unreachable!("confidence prompt parses to confidence"),
        }
    }

    async fn classify(&mut self) -> Result<Category, PipelineError> {
        let messages = self
            .prompts
            .build_prompt(PromptKind::Classification, &PromptContext::new(self.problem))?;
        match self.ask(PromptKind::Classification, messages).await?.0 {
            Parsed::Category(c) => Ok(c),
            _ => unreachable!("classification prompt parses to a category"),
        }
    }

    async fn statements(&mut self) -> Result<Vec<String>, PipelineError> {
        let messages = self
            .prompts
            .build_prompt(PromptKind::DeclarativeTransform, &PromptContext::new(self.problem))?;
        match self.ask(PromptKind::DeclarativeTransform, messages).await?.0 {
            Parsed::Statements(s) => Ok(s),
            _ => unreachable!("declarative prompt parses to statements"),
        }
    }

    async fn factors(&mut self, caption: &str) -> Result<Vec<VisualFactor>, PipelineError> {
        let ctx = PromptContext::new(self.problem).caption(caption);
        let messages = self.prompts.build_prompt(PromptKind::FactorGeneration, &ctx)?;
        let Parsed::Factors(mut list) = self.ask(PromptKind::FactorGeneration, messages).await?.0 else {
            unreachable!("factor prompt parses to factors")
        };
        list.truncate(self.cfg.max_factors);
        Ok(list
            .into_iter()
            .enumerate()
            .map(|(index, description)| VisualFactor { index, description })
            .collect())
    }

    async fn hypotheses(&mut self, caption: &str, factors: &[VisualFactor]) -> Result<ClueTable, PipelineError> {
        let ctx = PromptContext::new(self.problem).caption(caption).factors(factors);
        let messages = self.prompts.build_prompt(PromptKind::ClueHypotheses, &ctx)?;
        let Parsed::ClueHypotheses(mut table) = self.ask(PromptKind::ClueHypotheses, messages).await?.0 else {
            unreachable!("clue prompt parses to a clue table")
        };
        table.retain(|j, _| *j < factors.len());
        for (&j, row) in &table {
            for (&i, text) in row {
                self.clues.push(VisualClue {
                    factor_index: j,
                    choice_index: Some(i),
                    text: text.clone(),
                    source: ClueOrigin::LlmHypothesis,
                });
            }
        }
        Ok(table)
    }

    async fn vcu_branch(&mut self) -> Result<(usize, Vec<AlignmentScore>), PipelineError> {
        let statements = self.statements().await?;
        let scores = self
            .session
            .align(StepKind::ChoiceAlignment, &self.problem.image, &statements)
            .await?;
        let answer = argmax_lowest(&sum_scores(&scores)).unwrap_or(0);
        Ok((answer, scores))
    }

    async fn vci_branch(&mut self, caption: &str, source: ClueSource) -> Result<(usize, Vec<VisualClue>), PipelineError> {
        let factors = self.factors(caption).await?;
        let mut observed = Vec::new();
        if !factors.is_empty() {
            match source {
                ClueSource::Llm => {
                    let table = self.hypotheses(caption, &factors).await?;
                    for factor in &factors {
                        let Some(hyps) = table.get(&factor.index).filter(|h| !h.is_empty()) else {
                            continue;
                        };
                        let clue = select_clue(factor, hyps, &self.problem.image, &mut self.session).await?;
                        observed.push(clue);
                    }
                }
                ClueSource::Vqa => {
                    for factor in &factors {
                        let question = factor_question(&factor.description);
                        let answer = self.session.vqa(&self.problem.image, &question).await?;
                        observed.push(VisualClue {
                            factor_index: factor.index,
                            choice_index: None,
                            text: answer,
                            source: ClueOrigin::VqaAnswer,
                        });
                    }
                }
            }
        }
        self.clues.extend(observed.iter().cloned());
        let ctx = PromptContext::new(self.problem).caption(caption).clues(&observed);
        let r2 = self.reason(PromptKind::FinalReasoning, ctx).await?;
        Ok((r2.answer.unwrap_or(0), observed))
    }

    async fn blip2_clue(&mut self, caption: &str) -> Result<usize, PipelineError> {
        let factors = self.factors(caption).await?;
        if factors.is_empty() {
            return Ok(self.vcu_branch().await?.0);
        }
        let table = self.hypotheses(caption, &factors).await?;
        let n_choices = self.problem.choices.len();
        let complete = factors
            .iter()
            .all(|f| table.get(&f.index).is_some_and(|row| row.len() == n_choices));
        let substitutes = if complete { None } else { Some(self.statements().await?) };
        let texts: Vec<Vec<String>> = (0..n_choices)
            .map(|i| {
                factors
                    .iter()
                    .map(|f| {
                        table
                            .get(&f.index)
                            .and_then(|row| row.get(&i))
                            .cloned()
                            .unwrap_or_else(|| substitutes.as_ref().expect("substitutes computed")[i].clone())
                    })
                    .collect()
            })
            .collect();
        let scores = score_choices(ScoreMode::ClueAvg, &self.problem.image, &texts, &mut self.session).await?;
        Ok(argmax_lowest(&scores).unwrap_or(0))
    }

    async fn decide(&mut self) -> Result<usize, PipelineError> {
        let caption = self.session.caption(&self.problem.image).await?;
        let ctx = PromptContext::new(self.problem).caption(&caption);
        let r1 = self.reason(PromptKind::InitialReasoning, ctx).await?;
        let initial = r1.answer.unwrap_or(0);
        let confidence = self.confidence(&caption, &r1).await?;
        self.confidence = Some(confidence);

        let strategy = self.cfg.strategy;
        if strategy == Strategy::VicorFull && confidence == Confidence::Confident {
            return Ok(initial);
        }
        let category = self.classify().await?;
        self.category = Some(category);

        Ok(match strategy {
            Strategy::VicorFull => match category {
                Category::Vcu => self.vcu_branch().await?.0,
                Category::Vci => self.vci_branch(&caption, self.cfg.clue_source).await?.0,
            },
            Strategy::Blip2Orig => self.vcu_branch().await?.0,
            Strategy::Blip2LlmClue => self.blip2_clue(&caption).await?,
            Strategy::LlmCaption => initial,
            Strategy::LlmCaptionVqaClue => self.vci_branch(&caption, ClueSource::Vqa).await?.0,
            Strategy::LlmCaptionLlmClue => self.vci_branch(&caption, ClueSource::Llm).await?.0,
        })
    }
}

/// Turns a factor description into the question put to the VQA model.
pub fn factor_question(factor: &str) -> String {
    let f = factor.trim().trim_end_matches('.');
    if f.ends_with('?') {
        f.to_string()
    } else {
        format!("What is {f}?")
    }
}

/// Runs one problem under `cfg`. Never fails: a problem-level error yields
/// the token-overlap fallback answer and an error mark in the trace.
pub async fn run_problem(
    problem: &Problem,
    cfg: &PipelineConfig,
    prompts: &PromptLibrary,
    backends: &Backends,
) -> Decision {
    let mut run = Run {
        problem,
        cfg,
        prompts,
        session: backends.session(),
        confidence: None,
        category: None,
        clues: Vec::new(),
        last_text: String::new(),
    };
    let outcome = if problem.choices.len() == 1 {
        Ok(0)
    } else {
        match cfg.validate() {
            Ok(()) => run.decide().await,
            Err(e) => Err(e),
        }
    };
    let (answer, error) = match outcome {
        Ok(a) => (a, None),
        Err(e) => {
            tracing::warn!(problem = %problem.id, error = %e, "problem failed");
            (overlap_fallback(&run.last_text, &problem.choices), Some(e.to_string()))
        }
    };
    let trace = Trace {
        problem_id: problem.id.clone(),
        dataset: None,
        strategy: cfg.strategy,
        clue_source: cfg.clue_source,
        steps: run.session.into_steps(),
        confidence: run.confidence,
        category: run.category,
        clues: run.clues,
        answer,
        gold: problem.gold,
        error,
    };
    Decision {
        answer,
        strategy_used: cfg.strategy,
        trace,
    }
}

/// VCU branch on its own: one declarative call, one align call.
pub async fn vcu_branch(
    problem: &Problem,
    cfg: &PipelineConfig,
    prompts: &PromptLibrary,
    backends: &Backends,
) -> Result<(usize, Vec<AlignmentScore>, Trace), PipelineError> {
    if problem.choices.len() < 2 {
        return Err(PipelineError::Precondition("vcu_branch needs at least two choices".into()));
    }
    let mut run = detached(problem, cfg, prompts, backends);
    let (answer, scores) = run.vcu_branch().await?;
    Ok((answer, scores, finish(run, answer)))
}

/// VCI branch on its own, given a caption.
pub async fn vci_branch(
    problem: &Problem,
    caption: &str,
    cfg: &PipelineConfig,
    prompts: &PromptLibrary,
    backends: &Backends,
) -> Result<(usize, Vec<VisualClue>, Trace), PipelineError> {
    if caption.trim().is_empty() {
        return Err(PipelineError::Precondition("vci_branch needs a caption".into()));
    }
    cfg.validate()?;
    let mut run = detached(problem, cfg, prompts, backends);
    let (answer, clues) = run.vci_branch(caption, cfg.clue_source).await?;
    Ok((answer, clues, finish(run, answer)))
}

/// Aligner-decided strategy over averaged LLM clue scores.
pub async fn blip2_clue_strategy(
    problem: &Problem,
    caption: &str,
    cfg: &PipelineConfig,
    prompts: &PromptLibrary,
    backends: &Backends,
) -> Result<(usize, Trace), PipelineError> {
    cfg.validate()?;
    let mut run = detached(problem, cfg, prompts, backends);
    let answer = run.blip2_clue(caption).await?;
    Ok((answer, finish(run, answer)))
}

fn detached<'a>(
    problem: &'a Problem,
    cfg: &'a PipelineConfig,
    prompts: &'a PromptLibrary,
    backends: &'a Backends,
) -> Run<'a, 'a> {
    Run {
        problem,
        cfg,
        prompts,
        session: backends.session(),
        confidence: None,
        category: None,
        clues: Vec::new(),
        last_text: String::new(),
    }
}

fn finish(run: Run<'_, '_>, answer: usize) -> Trace {
    Trace {
        problem_id: run.problem.id.clone(),
        dataset: None,
        strategy: run.cfg.strategy,
        clue_source: run.cfg.clue_source,
        steps: run.session.into_steps(),
        confidence: run.confidence,
        category: run.category,
        clues: run.clues,
        answer,
        gold: run.problem.gold,
        error: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax_lowest(&[1.3, 1.3, 0.2, 0.1]), Some(0));
        assert_eq!(argmax_lowest(&[0.1, 0.7, 0.7]), Some(1));
        assert_eq!(argmax_lowest(&[]), None);
        assert_eq!(argmax_lowest(&[-5.0]), Some(0));
    }

    #[test]
    fn clue_avg_arithmetic() {
        let row: Vec<_> = [1.0, 0.5, 0.3].iter().map(|&c| AlignmentScore::new(c, 0.0)).collect();
        let s = clue_average(&[row]).unwrap();
        assert!((s[0] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn clue_avg_single_clue_equals_sum() {
        let scores = [AlignmentScore::new(0.9, 0.4), AlignmentScore::new(0.1, 0.2)];
        let matrix: Vec<Vec<_>> = scores.iter().map(|s| vec![*s]).collect();
        let avg = clue_average(&matrix).unwrap();
        let sum = sum_scores(&scores);
        assert_eq!(avg[0].to_bits(), sum[0].to_bits());
        assert_eq!(avg[1].to_bits(), sum[1].to_bits());
    }

    #[test]
    fn ragged_matrix_rejected() {
        let a = AlignmentScore::new(1.0, 0.0);
        let err = clue_average(&[vec![a, a], vec![a]]).unwrap_err();
        assert!(matches!(
            err,
            PipelineError::RaggedClueMatrix {
                choice: 1,
                got: 1,
                expected: 2
            }
        ));
    }

    #[test]
    fn vqa_question_from_factor() {
        assert_eq!(factor_question("the weather"), "What is the weather?");
        assert_eq!(factor_question("Is it raining?"), "Is it raining?");
    }
}
