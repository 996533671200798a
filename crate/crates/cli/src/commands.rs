use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context as _, Result};
use serde_json::json;
use vicor_core::backends::{
    Backend, Backends, DiskCache, FixtureBackend, HttpBackend, HttpConfig, RecordingBackend,
};
use vicor_core::domain::{Problem, Strategy, Trace};
use vicor_core::harness::{
    aggregate_report, bind_person_names, cells_from_traces, evaluate, load_dataset, read_traces, run_problems,
    DatasetKind, StrategyReport,
};
use vicor_core::prompts::PromptLibrary;

use crate::config::{ensure_writable, RunConfig};

pub const TRACES_FILE: &str = "traces.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_JSON: &str = "report.json";

pub struct Outcome {
    /// Problems whose trace carries an error.
    pub errors: usize,
}

struct Loaded {
    label: &'static str,
    problems: Vec<Problem>,
}

fn backends(cfg: &RunConfig) -> Result<(Backends, Arc<RecordingBackend>)> {
    let inner: Arc<dyn Backend> = match &cfg.backend.fixtures {
        Some(path) => Arc::new(
            FixtureBackend::load(path).with_context(|| format!("loading fixtures {}", path.display()))?,
        ),
        None => {
            let http = HttpConfig {
                llm_endpoint: cfg.backend.llm_endpoint.clone(),
                gateway_endpoint: cfg.backend.gateway_endpoint.clone(),
                api_key: None,
                timeout_secs: cfg.backend.timeout_secs,
                retry: cfg.backend.retry.clone(),
            }
            .with_env_key();
            if http.api_key.is_none() {
                tracing::warn!("no API key in the environment; LLM requests go unauthenticated");
            }
            Arc::new(HttpBackend::new(http)?)
        }
    };
    let recorder = Arc::new(RecordingBackend::new(inner));
    let mut b = Backends::new(recorder.clone() as Arc<dyn Backend>);
    if let Some(dir) = &cfg.cache_dir {
        b = b.with_cache(DiskCache::open(dir).with_context(|| format!("opening cache {}", dir.display()))?);
    }
    Ok((b, recorder))
}

fn datasets(cfg: &RunConfig) -> Result<Vec<Loaded>> {
    let mut out = Vec::new();
    for (i, entry) in cfg.datasets.iter().enumerate() {
        let spec = entry.spec(i)?;
        let mut problems = load_dataset(&spec)?;
        if spec.name == DatasetKind::VcrStyle {
            problems = problems.into_iter().map(bind_person_names).collect::<Result<_, _>>()?;
        }
        tracing::info!(dataset = spec.name.label(), problems = problems.len(), "loaded");
        out.push(Loaded {
            label: spec.name.label(),
            problems,
        });
    }
    Ok(out)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_report(out_dir: &Path, report: &StrategyReport) -> Result<()> {
    let csv = report.to_csv()?;
    std::fs::write(out_dir.join(REPORT_CSV), csv).context("writing report csv")?;
    write_json(
        &out_dir.join(REPORT_JSON),
        &json!({
            "cells": report.cells,
            "aggregates": report.aggregates_json(),
        }),
    )
}

/// Runs each strategy over every configured dataset and writes the trace,
/// summary and report artifacts.
pub async fn execute(cfg: &RunConfig, strategies: &[Strategy]) -> Result<Outcome> {
    ensure_writable(&cfg.out_dir)?;
    let loaded = datasets(cfg)?;
    let prompts = PromptLibrary::load(cfg.prompts_dir.as_deref(), &cfg.icl_config())?;
    let (backends, recorder) = backends(cfg)?;

    let traces_path = cfg.out_dir.join(TRACES_FILE);
    let mut sink = BufWriter::new(
        File::create(&traces_path).with_context(|| format!("creating {}", traces_path.display()))?,
    );
    let mut traces: Vec<Trace> = Vec::new();
    let mut runs = Vec::new();
    for &strategy in strategies {
        let pipeline = cfg.pipeline(strategy);
        for d in &loaded {
            let decisions = run_problems(
                &d.problems,
                &pipeline,
                &prompts,
                &backends,
                cfg.workers,
                Some(d.label),
                Some(&mut sink),
            )
            .await?;
            let errors = decisions.iter().filter(|x| x.trace.error.is_some()).count();
            let fallbacks = decisions
                .iter()
                .filter(|x| x.trace.steps.iter().any(|s| s.fallback))
                .count();
            let accuracy = if d.problems.iter().all(|p| p.gold.is_some()) && !d.problems.is_empty() {
                Some(evaluate(&decisions, &d.problems)?)
            } else {
                None
            };
            match &accuracy {
                Some(a) => println!(
                    "{strategy} {}: {}/{} correct ({:.1}%), {errors} errors",
                    d.label, a.correct, a.total, a.percent
                ),
                None => println!("{strategy} {}: {} problems, {errors} errors", d.label, decisions.len()),
            }
            runs.push(json!({
                "strategy": strategy,
                "dataset": d.label,
                "problems": decisions.len(),
                "accuracy": accuracy,
                "errors": errors,
                "fallbacks": fallbacks,
            }));
            traces.extend(decisions.into_iter().map(|x| x.trace));
        }
    }
    sink.flush().context("flushing traces")?;

    let report = aggregate_report(&cells_from_traces(&traces));
    write_report(&cfg.out_dir, &report)?;
    write_json(
        &cfg.out_dir.join(SUMMARY_FILE),
        &json!({
            "config": cfg.echo(),
            "strategies": strategies,
            "runs": runs,
            "aggregates": report.aggregates_json(),
        }),
    )?;
    let calls = recorder.calls();
    eprintln!("backend calls: {calls}");
    tracing::info!(calls, out = %cfg.out_dir.display(), "done");
    Ok(Outcome {
        errors: traces.iter().filter(|t| t.error.is_some()).count(),
    })
}

/// Rebuilds the report from existing trace files.
pub fn report(traces: &[PathBuf], out_dir: Option<&Path>) -> Result<()> {
    let mut all = Vec::new();
    for path in traces {
        let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
        all.extend(read_traces(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))?);
    }
    let report = aggregate_report(&cells_from_traces(&all));
    match out_dir {
        Some(dir) => {
            ensure_writable(dir)?;
            write_report(dir, &report)?;
        }
        None => print!("{}", report.to_csv()?),
    }
    for a in &report.aggregates {
        eprintln!("{} {}: {:.1}", a.strategy, a.category, a.rounded());
    }
    Ok(())
}
