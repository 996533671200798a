//! Accuracy cells keyed by (dataset, strategy, category, confidence) and the
//! cross-dataset aggregate.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::{percent_tenths, HarnessError};
use crate::domain::{Category, Confidence, Strategy, Trace};

pub const DEFAULT_DATASET: &str = "default";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub dataset: String,
    pub category: Category,
    pub confidence: Confidence,
    pub strategy: Strategy,
    pub correct: u64,
    pub total: u64,
}

impl Cell {
    /// Cell from a published accuracy and example count; the correct count is
    /// rounded to the nearest integer.
    pub fn from_published(
        dataset: &str,
        strategy: Strategy,
        category: Category,
        confidence: Confidence,
        accuracy_pct: f64,
        total: u64,
    ) -> Self {
        Self {
            dataset: dataset.to_string(),
            category,
            confidence,
            strategy,
            correct: (accuracy_pct * total as f64 / 100.0).round() as u64,
            total,
        }
    }

    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub strategy: Strategy,
    pub category: Category,
    /// Unrounded percentage.
    pub accuracy: f64,
    /// Example-weighted percentage within each dataset.
    pub per_dataset: BTreeMap<String, f64>,
}

impl Aggregate {
    /// One decimal, half-up.
    pub fn rounded(&self) -> f64 {
        round_half_up_1(self.accuracy)
    }
}

pub fn round_half_up_1(x: f64) -> f64 {
    // The nudge absorbs binary representation error of values like 63.45.
    ((x * 10.0) + 0.5 + 1e-9).floor() / 10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyReport {
    pub cells: Vec<Cell>,
    pub aggregates: Vec<Aggregate>,
}

/// Buckets scored traces into cells. Traces missing a category (the full
/// policy stops before classifying when confident) borrow the label another
/// trace of the same problem recorded; failing that they count as VCI.
/// Traces without a gold label are skipped.
pub fn cells_from_traces(traces: &[Trace]) -> Vec<Cell> {
    let dataset_of = |t: &Trace| t.dataset.clone().unwrap_or_else(|| DEFAULT_DATASET.to_string());
    let mut labels: HashMap<(String, String), Category> = HashMap::new();
    for t in traces {
        if let Some(c) = t.category {
            labels.entry((dataset_of(t), t.problem_id.clone())).or_insert(c);
        }
    }
    let mut acc: BTreeMap<(String, Strategy, Category, Confidence), (u64, u64)> = BTreeMap::new();
    for t in traces {
        let Some(gold) = t.gold else { continue };
        let dataset = dataset_of(t);
        let category = t
            .category
            .or_else(|| labels.get(&(dataset.clone(), t.problem_id.clone())).copied())
            .unwrap_or(Category::Vci);
        let confidence = t.confidence.unwrap_or(Confidence::NotConfident);
        let e = acc.entry((dataset, t.strategy, category, confidence)).or_default();
        e.0 += u64::from(t.answer == gold);
        e.1 += 1;
    }
    acc.into_iter()
        .map(|((dataset, strategy, category, confidence), (correct, total))| Cell {
            dataset,
            category,
            confidence,
            strategy,
            correct,
            total,
        })
        .collect()
}

/// For each (strategy, category): example-weighted accuracy across the
/// confidence cells of each dataset, then the plain mean over datasets.
pub fn aggregate_report(cells: &[Cell]) -> StrategyReport {
    let mut sums: BTreeMap<(Strategy, Category), BTreeMap<String, (u64, u64)>> = BTreeMap::new();
    for c in cells {
        let e = sums
            .entry((c.strategy, c.category))
            .or_default()
            .entry(c.dataset.clone())
            .or_default();
        e.0 += c.correct;
        e.1 += c.total;
    }
    let aggregates = sums
        .into_iter()
        .filter_map(|((strategy, category), datasets)| {
            let per_dataset: BTreeMap<String, f64> = datasets
                .into_iter()
                .filter(|(_, (_, total))| *total > 0)
                .map(|(d, (correct, total))| (d, 100.0 * correct as f64 / total as f64))
                .collect();
            if per_dataset.is_empty() {
                return None;
            }
            let accuracy = per_dataset.values().sum::<f64>() / per_dataset.len() as f64;
            Some(Aggregate {
                strategy,
                category,
                accuracy,
                per_dataset,
            })
        })
        .collect();
    let mut cells = cells.to_vec();
    cells.sort_by(|a, b| {
        (&a.dataset, a.strategy, a.category, a.confidence).cmp(&(&b.dataset, b.strategy, b.category, b.confidence))
    });
    StrategyReport { cells, aggregates }
}

impl StrategyReport {
    pub fn aggregate(&self, strategy: Strategy, category: Category) -> Option<&Aggregate> {
        self.aggregates
            .iter()
            .find(|a| a.strategy == strategy && a.category == category)
    }

    /// `dataset,strategy,category,confidence,correct,total,accuracy`.
    pub fn to_csv(&self) -> Result<String, HarnessError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| HarnessError::Report(e.to_string());
        w.write_record(["dataset", "strategy", "category", "confidence", "correct", "total", "accuracy"])
            .map_err(csv_err)?;
        for c in &self.cells {
            let tenths = percent_tenths(c.correct, c.total);
            w.write_record([
                c.dataset.clone(),
                c.strategy.to_string(),
                c.category.to_string(),
                c.confidence.to_string(),
                c.correct.to_string(),
                c.total.to_string(),
                format!("{}.{}", tenths / 10, tenths % 10),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| HarnessError::Report(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| HarnessError::Report(e.to_string()))
    }

    pub fn aggregates_json(&self) -> serde_json::Value {
        serde_json::Value::Array(
            self.aggregates
                .iter()
                .map(|a| {
                    serde_json::json!({
                        "strategy": a.strategy,
                        "category": a.category,
                        "accuracy": a.rounded(),
                        "accuracy_exact": a.accuracy,
                        "per_dataset": a.per_dataset,
                    })
                })
                .collect(),
        )
    }
}
