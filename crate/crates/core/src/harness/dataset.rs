//! Internal dataset schema (JSON lines), person-token binding and sampling.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::LazyLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::domain::{validate_problem, ImageRef, PersonBox, Problem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DatasetKind {
    /// Human-centric questions with person boxes.
    VcrStyle,
    AokvqaStyle,
}

impl DatasetKind {
    pub fn label(&self) -> &'static str {
        match self {
            DatasetKind::VcrStyle => "VCR",
            DatasetKind::AokvqaStyle => "AOKVQA",
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::VcrStyle => "VCR_STYLE",
            DatasetKind::AokvqaStyle => "AOKVQA_STYLE",
        })
    }
}

impl FromStr for DatasetKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().replace('-', "_").as_str() {
            "VCR_STYLE" | "VCR" => Ok(DatasetKind::VcrStyle),
            "AOKVQA_STYLE" | "AOKVQA" | "A_OKVQA" => Ok(DatasetKind::AokvqaStyle),
            _ => Err(format!("unknown dataset kind `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: DatasetKind,
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_size: Option<usize>,
    #[serde(default)]
    pub sample_seed: u64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPerson {
    x_center: f64,
    y_center: f64,
    tag: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEntry {
    id: String,
    image_path: PathBuf,
    question: String,
    choices: Vec<String>,
    #[serde(default)]
    gold: Option<usize>,
    #[serde(default)]
    persons: Option<Vec<RawPerson>>,
}

/// Loads and validates every line of a dataset file, in file order.
/// `image_path` is resolved relative to the dataset file.
pub fn load_dataset(spec: &DatasetSpec) -> Result<Vec<Problem>, HarnessError> {
    let text = std::fs::read_to_string(&spec.path).map_err(|source| HarnessError::Io {
        path: spec.path.display().to_string(),
        source,
    })?;
    let base = spec.path.parent().unwrap_or(Path::new("."));
    let mut problems = Vec::new();
    for (index, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let schema = |reason: String| HarnessError::SchemaError { index, reason };
        let raw: RawEntry = serde_json::from_str(line).map_err(|e| schema(e.to_string()))?;
        let image_path = base.join(&raw.image_path);
        let image = ImageRef::from_path(&image_path)
            .map_err(|e| schema(format!("image {}: {e}", image_path.display())))?;
        let persons = match spec.name {
            DatasetKind::VcrStyle => Some(
                raw.persons
                    .unwrap_or_default()
                    .into_iter()
                    .map(|p| PersonBox {
                        x_center: p.x_center,
                        y_center: p.y_center,
                        original_tag: p.tag,
                    })
                    .collect(),
            ),
            DatasetKind::AokvqaStyle => None,
        };
        let problem = validate_problem(Problem {
            id: raw.id,
            image,
            question: raw.question,
            choices: raw.choices,
            gold: raw.gold,
            persons,
        })
        .map_err(|e| schema(e.to_string()))?;
        problems.push(problem);
    }
    if let Some(size) = spec.sample_size {
        problems = sample_subset(problems, size, spec.sample_seed)?;
    }
    Ok(problems)
}

/// Dataset person tokens look like `[person3]`.
static PERSON_TOKEN: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\[person\d+\]").unwrap());

const ORDINALS: [&str; 10] = [
    "first", "second", "third", "fourth", "fifth", "sixth", "seventh", "eighth", "ninth", "tenth",
];

fn ordinal(n: usize) -> String {
    match ORDINALS.get(n) {
        Some(o) => o.to_string(),
        None => {
            let k = n + 1;
            let suffix = match (k % 10, k % 100) {
                (1, x) if x != 11 => "st",
                (2, x) if x != 12 => "nd",
                (3, x) if x != 13 => "rd",
                _ => "th",
            };
            format!("{k}{suffix}")
        }
    }
}

fn bin_of(x: f64) -> usize {
    if x < 1.0 / 3.0 {
        0
    } else if x < 2.0 / 3.0 {
        1
    } else {
        2
    }
}

const BIN_NAMES: [&str; 3] = ["on the left", "in the middle", "on the right"];

/// Display names for each box, by left/middle/right third of the image.
/// Several people in one third get ordinals, left to right.
pub fn person_names(boxes: &[PersonBox]) -> Vec<String> {
    let mut names = vec![String::new(); boxes.len()];
    for (bin, place) in BIN_NAMES.iter().enumerate() {
        let mut members: Vec<usize> = (0..boxes.len()).filter(|&i| bin_of(boxes[i].x_center) == bin).collect();
        members.sort_by(|&a, &b| boxes[a].x_center.total_cmp(&boxes[b].x_center));
        let many = members.len() > 1;
        for (rank, &i) in members.iter().enumerate() {
            names[i] = if many {
                format!("the {} person {place}", ordinal(rank))
            } else {
                format!("the person {place}")
            };
        }
    }
    names
}

/// Replaces every person token in the question and choices by its
/// position-based name.
pub fn bind_person_names(mut problem: Problem) -> Result<Problem, HarnessError> {
    let boxes = problem.persons.clone().unwrap_or_default();
    let names = person_names(&boxes);
    let rewrite = |text: &str| -> Result<String, HarnessError> {
        let mut err = None;
        let out = PERSON_TOKEN.replace_all(text, |caps: &regex::Captures| {
            let token = &caps[0];
            match boxes.iter().position(|b| b.original_tag.eq_ignore_ascii_case(token)) {
                Some(i) => names[i].clone(),
                None => {
                    err.get_or_insert_with(|| token.to_string());
                    token.to_string()
                }
            }
        });
        match err {
            Some(token) => Err(HarnessError::UnboundPersonToken {
                id: problem.id.clone(),
                token,
            }),
            None => Ok(out.into_owned()),
        }
    };
    let question = rewrite(&problem.question)?;
    let choices = problem
        .choices
        .iter()
        .map(|c| rewrite(c))
        .collect::<Result<Vec<_>, _>>()?;
    problem.question = question;
    problem.choices = choices;
    Ok(problem)
}

/// Seeded subset, returned in original order. The generator is ChaCha8, so
/// the result is the same on every platform.
pub fn sample_subset(problems: Vec<Problem>, size: usize, seed: u64) -> Result<Vec<Problem>, HarnessError> {
    let len = problems.len();
    if size > len {
        return Err(HarnessError::SizeTooLarge { size, len });
    }
    if size == len {
        return Ok(problems);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..len).collect();
    for i in 0..size {
        let j = i + rng.random_range(0..(len - i) as u64) as usize;
        idx.swap(i, j);
    }
    let mut keep = idx[..size].to_vec();
    keep.sort_unstable();
    let mut slots: Vec<Option<Problem>> = problems.into_iter().map(Some).collect();
    Ok(keep.into_iter().map(|i| slots[i].take().expect("indices are distinct")).collect())
}
