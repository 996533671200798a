//! Datasets, batch execution, accuracy and ablation reports.

pub mod dataset;
pub mod report;

use std::collections::HashMap;
use std::io::{BufRead, Write};

use futures::StreamExt;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::Backends;
use crate::domain::{Decision, Problem, Trace};
use crate::pipeline::{run_problem, PipelineConfig};
use crate::prompts::PromptLibrary;

pub use dataset::{bind_person_names, load_dataset, person_names, sample_subset, DatasetKind, DatasetSpec};
pub use report::{aggregate_report, cells_from_traces, Aggregate, Cell, StrategyReport};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("dataset entry {index}: {reason}")]
    SchemaError { index: usize, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("problem {id}: person token {token} has no box")]
    UnboundPersonToken { id: String, token: String },
    #[error("cannot sample {size} of {len} problems")]
    SizeTooLarge { size: usize, len: usize },
    #[error("problem {0} has no gold label")]
    MissingGold(String),
    #[error("problem {0} has no decision")]
    MissingDecision(String),
    #[error("nothing to evaluate")]
    EvalEmpty,
    #[error("trace line {line}: {reason}")]
    TraceParse { line: usize, reason: String },
    #[error("report: {0}")]
    Report(String),
}

/// Tenths of a percent, rounded half-up, computed in integers.
pub fn percent_tenths(correct: u64, total: u64) -> u64 {
    if total == 0 {
        return 0;
    }
    (2000 * correct + total) / (2 * total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub correct: u64,
    pub total: u64,
    /// One decimal, half-up.
    pub percent: f64,
}

impl Accuracy {
    pub fn new(correct: u64, total: u64) -> Self {
        Self {
            correct,
            total,
            percent: percent_tenths(correct, total) as f64 / 10.0,
        }
    }

    pub fn ratio(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }
}

/// Accuracy of `decisions` against the gold labels of `problems`.
pub fn evaluate(decisions: &[Decision], problems: &[Problem]) -> Result<Accuracy, HarnessError> {
    if problems.is_empty() {
        return Err(HarnessError::EvalEmpty);
    }
    let by_id: HashMap<&str, usize> = decisions
        .iter()
        .map(|d| (d.trace.problem_id.as_str(), d.answer))
        .collect();
    let mut correct = 0;
    for p in problems {
        let gold = p.gold.ok_or_else(|| HarnessError::MissingGold(p.id.clone()))?;
        let answer = by_id
            .get(p.id.as_str())
            .ok_or_else(|| HarnessError::MissingDecision(p.id.clone()))?;
        correct += u64::from(*answer == gold);
    }
    Ok(Accuracy::new(correct, problems.len() as u64))
}

/// Runs every problem with at most `workers` in flight. Results come back
/// in input order, and each trace is written to `sink` as one JSON line as
/// soon as it and all earlier ones are done.
pub async fn run_problems<W: Write>(
    problems: &[Problem],
    cfg: &PipelineConfig,
    prompts: &PromptLibrary,
    backends: &Backends,
    workers: usize,
    dataset: Option<&str>,
    mut sink: Option<&mut W>,
) -> Result<Vec<Decision>, HarnessError> {
    let mut stream = futures::stream::iter(problems)
        .map(|p| run_problem(p, cfg, prompts, backends))
        .buffered(workers.max(1));
    let mut out = Vec::with_capacity(problems.len());
    while let Some(mut decision) = stream.next().await {
        decision.trace.dataset = dataset.map(str::to_string);
        if let Some(w) = sink.as_deref_mut() {
            write_trace(w, &decision.trace)?;
        }
        out.push(decision);
    }
    Ok(out)
}

fn io_err(source: std::io::Error) -> HarnessError {
    HarnessError::Io {
        path: "<trace output>".into(),
        source,
    }
}

pub fn write_trace<W: Write>(w: &mut W, trace: &Trace) -> Result<(), HarnessError> {
    serde_json::to_writer(&mut *w, trace).map_err(|e| io_err(e.into()))?;
    w.write_all(b"\n").map_err(io_err)?;
    w.flush().map_err(io_err)
}

pub fn read_traces<R: BufRead>(r: R) -> Result<Vec<Trace>, HarnessError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| HarnessError::TraceParse {
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}
