//! Run configuration: one TOML document, overridden by command-line flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use vicor_core::backends::{ChatParams, RetryPolicy, LLM_KEY_ENV};
use vicor_core::domain::{ClueSource, Strategy};
use vicor_core::harness::{DatasetKind, DatasetSpec};
use vicor_core::pipeline::PipelineConfig;
use vicor_core::prompts::{IclConfig, PromptKind};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {reason}")]
    Read { path: String, reason: String },
    #[error("config {path}: {reason}")]
    Parse { path: String, reason: String },
    #[error("no dataset configured")]
    NoDataset,
    #[error("dataset entry {index}: {reason}")]
    Dataset { index: usize, reason: String },
    #[error("strategy list is empty")]
    EmptyStrategies,
    #[error("workers must be at least 1")]
    Workers,
    #[error("{0} endpoint is not set and no fixtures were given")]
    MissingEndpoint(&'static str),
    #[error("bad --backend value `{0}`; expected `http` or `fixtures:PATH`")]
    BackendSpec(String),
    #[error("output directory {path} is not writable: {reason}")]
    OutputDir { path: String, reason: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetEntry {
    /// `VCR` or `AOKVQA`.
    pub kind: String,
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_size: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

impl DatasetEntry {
    pub fn spec(&self, index: usize) -> Result<DatasetSpec, ConfigError> {
        let name: DatasetKind = self
            .kind
            .parse()
            .map_err(|reason| ConfigError::Dataset { index, reason })?;
        Ok(DatasetSpec {
            name,
            path: self.path.clone(),
            sample_size: self.sample_size,
            sample_seed: self.seed,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendSection {
    /// Serve every request from this fixture file instead of the network.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fixtures: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub llm_endpoint: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gateway_endpoint: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timeout_secs: Option<u64>,
    pub retry: RetryPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub datasets: Vec<DatasetEntry>,
    pub strategy: Strategy,
    pub clue_source: ClueSource,
    pub max_factors: usize,
    /// Strategies for `ablate`.
    pub strategies: Vec<Strategy>,
    pub chat: ChatParams,
    /// Per-kind overrides of the in-context example counts.
    pub icl: BTreeMap<PromptKind, usize>,
    pub backend: BackendSection,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompts_dir: Option<PathBuf>,
    pub workers: usize,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let p = PipelineConfig::default();
        Self {
            datasets: Vec::new(),
            strategy: p.strategy,
            clue_source: p.clue_source,
            max_factors: p.max_factors,
            strategies: Strategy::ALL.to_vec(),
            chat: p.chat,
            icl: BTreeMap::new(),
            backend: BackendSection::default(),
            cache_dir: None,
            prompts_dir: None,
            workers: 4,
            out_dir: PathBuf::from("vicor-out"),
        }
    }
}

/// Values given on the command line; `None` leaves the file's value alone.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub datasets: Vec<String>,
    pub strategies: Vec<Strategy>,
    pub clue_source: Option<ClueSource>,
    pub sample_size: Option<usize>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub backend: Option<String>,
    pub llm_endpoint: Option<String>,
    pub gateway_endpoint: Option<String>,
    pub cache_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

const SECRET_KEYS: [&str; 4] = ["api_key", "key", "token", "secret"];

fn rebase(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let raw: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse {
            path: origin.to_string(),
            reason: e.to_string(),
        })?;
        if let Some(key) = find_secret(&raw) {
            return Err(ConfigError::Parse {
                path: origin.to_string(),
                reason: format!("`{key}` must not appear in a config file; set {LLM_KEY_ENV} instead"),
            });
        }
        raw.try_into().map_err(|e: toml::de::Error| ConfigError::Parse {
            path: origin.to_string(),
            reason: e.to_string(),
        })
    }

    /// Reads a config file. Relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        let mut cfg = Self::from_toml(&text, &path.display().to_string())?;
        let base = path.parent().unwrap_or(Path::new("."));
        for d in &mut cfg.datasets {
            rebase(base, &mut d.path);
        }
        for p in [&mut cfg.backend.fixtures, &mut cfg.cache_dir, &mut cfg.prompts_dir]
            .into_iter()
            .flatten()
        {
            rebase(base, p);
        }
        rebase(base, &mut cfg.out_dir);
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<(), ConfigError> {
        if !o.datasets.is_empty() {
            self.datasets = o
                .datasets
                .iter()
                .map(|d| parse_dataset_flag(d))
                .collect::<Result<_, _>>()?;
        }
        for d in &mut self.datasets {
            if let Some(n) = o.sample_size {
                d.sample_size = Some(n);
            }
            if let Some(s) = o.seed {
                d.seed = s;
            }
        }
        if let Some(&first) = o.strategies.first() {
            self.strategy = first;
            self.strategies = o.strategies.clone();
        }
        if let Some(c) = o.clue_source {
            self.clue_source = c;
        }
        if let Some(w) = o.workers {
            self.workers = w;
        }
        match o.backend.as_deref() {
            None => {}
            Some("http") => self.backend.fixtures = None,
            Some(other) => match other.strip_prefix("fixtures:") {
                Some(path) if !path.is_empty() => self.backend.fixtures = Some(PathBuf::from(path)),
                _ => return Err(ConfigError::BackendSpec(other.to_string())),
            },
        }
        if let Some(e) = &o.llm_endpoint {
            self.backend.llm_endpoint = Some(e.clone());
        }
        if let Some(e) = &o.gateway_endpoint {
            self.backend.gateway_endpoint = Some(e.clone());
        }
        if let Some(c) = &o.cache_dir {
            self.cache_dir = Some(c.clone());
        }
        if let Some(d) = &o.out_dir {
            self.out_dir = d.clone();
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.datasets.is_empty() {
            return Err(ConfigError::NoDataset);
        }
        for (i, d) in self.datasets.iter().enumerate() {
            d.spec(i)?;
        }
        if self.strategies.is_empty() {
            return Err(ConfigError::EmptyStrategies);
        }
        if self.workers == 0 {
            return Err(ConfigError::Workers);
        }
        if self.max_factors == 0 {
            return Err(ConfigError::Invalid("max_factors must be at least 1".into()));
        }
        if self.backend.fixtures.is_none() {
            if self.backend.llm_endpoint.is_none() {
                return Err(ConfigError::MissingEndpoint("LLM"));
            }
            if self.backend.gateway_endpoint.is_none() {
                return Err(ConfigError::MissingEndpoint("VLM gateway"));
            }
        }
        Ok(())
    }

    pub fn pipeline(&self, strategy: Strategy) -> PipelineConfig {
        PipelineConfig {
            strategy,
            clue_source: self.clue_source,
            max_factors: self.max_factors,
            chat: self.chat.clone(),
        }
    }

    pub fn icl_config(&self) -> IclConfig {
        let mut cfg = IclConfig::default();
        cfg.counts.extend(self.icl.iter().map(|(k, v)| (*k, *v)));
        cfg
    }

    /// The config as recorded in run artifacts. Holds no secrets; only
    /// whether a key was found in the environment.
    pub fn echo(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        v["icl"] = serde_json::to_value(self.icl_config()).expect("icl serializes");
        v["credentials"] = serde_json::json!({
            "source": format!("env:{LLM_KEY_ENV}"),
            "present": std::env::var(LLM_KEY_ENV).is_ok_and(|k| !k.is_empty()),
        });
        v
    }
}

fn find_secret(table: &toml::Table) -> Option<String> {
    for (k, v) in table {
        if SECRET_KEYS.contains(&k.to_ascii_lowercase().as_str()) {
            return Some(k.clone());
        }
        if let Some(inner) = v.as_table() {
            if let Some(found) = find_secret(inner) {
                return Some(format!("{k}.{found}"));
            }
        }
    }
    None
}

/// `KIND:PATH`, e.g. `VCR:data/vcr_val.jsonl`.
fn parse_dataset_flag(s: &str) -> Result<DatasetEntry, ConfigError> {
    let (kind, path) = s
        .split_once(':')
        .ok_or_else(|| ConfigError::Invalid(format!("--dataset `{s}`: expected KIND:PATH")))?;
    kind.parse::<DatasetKind>().map_err(ConfigError::Invalid)?;
    Ok(DatasetEntry {
        kind: kind.to_string(),
        path: PathBuf::from(path),
        sample_size: None,
        seed: 0,
    })
}

/// Creates `dir` if needed and checks that a file can be written there.
pub fn ensure_writable(dir: &Path) -> Result<(), ConfigError> {
    let err = |e: std::io::Error| ConfigError::OutputDir {
        path: dir.display().to_string(),
        reason: e.to_string(),
    };
    std::fs::create_dir_all(dir).map_err(err)?;
    let probe = dir.join(".vicor-write-probe");
    std::fs::write(&probe, b"").map_err(err)?;
    std::fs::remove_file(&probe).map_err(err)
}
