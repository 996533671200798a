//! Uniform client layer for the four model capabilities: chat, caption, VQA
//! and image-text alignment.
//!
//! Every call goes through [`Backends`], which fronts an implementation
//! ([`http::HttpBackend`], [`fixture::FixtureBackend`], ...) with an optional
//! content-addressed [`cache::DiskCache`]. A [`Session`] scopes calls to one
//! problem and records each of them as a trace step.

pub mod cache;
pub mod fixture;
pub mod http;

use std::sync::Arc;
use std::time::Instant;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{sha256_hex, AlignmentScore, ImageRef, RequestKind, StepKind, TraceStep};

pub use cache::DiskCache;
pub use fixture::{FixtureBackend, RecordingBackend};
pub use http::{HttpBackend, HttpConfig, RetryPolicy, LLM_KEY_ENV};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend unavailable after {attempts} attempt(s): {last}")]
    BackendUnavailable { attempts: u32, last: String },
    #[error("backend rejected request with HTTP {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("malformed backend response: {0}")]
    MalformedResponse(String),
    #[error("caption backend returned an empty caption")]
    EmptyCaption,
    #[error("aligner returned {got} scores for {expected} texts")]
    LengthMismatch { expected: usize, got: usize },
    #[error("no fixture matches request {digest} ({hint})")]
    MissingFixture { digest: String, hint: String },
    #[error("invalid request: {0}")]
    Precondition(String),
    #[error("backend not configured for capability {0:?}")]
    Unsupported(RequestKind),
    #[error("image: {0}")]
    Image(#[source] std::io::Error),
    #[error("cache: {0}")]
    Cache(#[source] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChatParams {
    pub model_name: String,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed_note: Option<String>,
}

impl Default for ChatParams {
    fn default() -> Self {
        Self {
            model_name: "gpt-3.5-turbo-0613".into(),
            temperature: 0.0,
            max_tokens: 512,
            seed_note: None,
        }
    }
}

/// Canonical request envelope. Images are referenced by digest so that the
/// same picture always yields the same key regardless of how it was encoded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendRequest {
    Chat {
        messages: Vec<Message>,
        params: ChatParams,
    },
    Caption {
        image_digest: String,
    },
    Vqa {
        image_digest: String,
        question: String,
    },
    Align {
        image_digest: String,
        texts: Vec<String>,
    },
}

impl BackendRequest {
    pub fn kind(&self) -> RequestKind {
        match self {
            BackendRequest::Chat { .. } => RequestKind::Chat,
            BackendRequest::Caption { .. } => RequestKind::Caption,
            BackendRequest::Vqa { .. } => RequestKind::Vqa,
            BackendRequest::Align { .. } => RequestKind::Align,
        }
    }

    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("request serialization is infallible")
    }
}

/// Stable content digest of a request. Any field change, temperature
/// included, changes the key.
pub fn cache_key(req: &BackendRequest) -> String {
    let mut buf = b"vicor-request-v1\n".to_vec();
    buf.extend_from_slice(req.canonical_json().as_bytes());
    sha256_hex(&buf)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawScore {
    pub itm: f64,
    pub itc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BackendResponse {
    Text(String),
    Scores(Vec<RawScore>),
}

impl BackendResponse {
    fn fits(&self, kind: RequestKind) -> bool {
        matches!(
            (self, kind),
            (BackendResponse::Scores(_), RequestKind::Align)
                | (BackendResponse::Text(_), RequestKind::Chat | RequestKind::Caption | RequestKind::Vqa)
        )
    }
}

/// One model-serving implementation. `image` carries the pixels for
/// image-bearing requests; implementations that key on the digest ignore it.
#[async_trait]
pub trait Backend: Send + Sync {
    async fn call(
        &self,
        req: &BackendRequest,
        image: Option<&ImageRef>,
    ) -> Result<BackendResponse, BackendError>;
}

#[derive(Clone)]
pub struct Backends {
    inner: Arc<dyn Backend>,
    cache: Option<DiskCache>,
}

impl Backends {
    pub fn new(inner: Arc<dyn Backend>) -> Self {
        Self { inner, cache: None }
    }

    pub fn with_cache(mut self, cache: DiskCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn cache(&self) -> Option<&DiskCache> {
        self.cache.as_ref()
    }

    pub async fn request(
        &self,
        req: &BackendRequest,
        image: Option<&ImageRef>,
    ) -> Result<BackendResponse, BackendError> {
        let key = cache_key(req);
        if let Some(cache) = &self.cache {
            if let Some(hit) = cache.get(&key).map_err(BackendError::Cache)? {
                return Ok(hit);
            }
        }
        let resp = self.inner.call(req, image).await?;
        if !resp.fits(req.kind()) {
            return Err(BackendError::MalformedResponse(format!(
                "{:?} request answered with the wrong payload type",
                req.kind()
            )));
        }
        if let Some(cache) = &self.cache {
            cache.put(&key, &resp).map_err(BackendError::Cache)?;
        }
        Ok(resp)
    }

    pub fn session(&self) -> Session<'_> {
        Session {
            backends: self,
            steps: Vec::new(),
        }
    }
}

/// Per-problem view over [`Backends`]; every call lands in `steps` in the
/// order it was issued.
pub struct Session<'a> {
    backends: &'a Backends,
    steps: Vec<TraceStep>,
}

impl Session<'_> {
    pub fn steps(&self) -> &[TraceStep] {
        &self.steps
    }

    pub fn into_steps(self) -> Vec<TraceStep> {
        self.steps
    }

    /// Flags the most recent step as the source of a fallback value.
    pub fn mark_fallback(&mut self) {
        if let Some(last) = self.steps.last_mut() {
            last.fallback = true;
        }
    }

    async fn issue(
        &mut self,
        kind: StepKind,
        req: BackendRequest,
        image: Option<&ImageRef>,
        retry: bool,
    ) -> Result<BackendResponse, BackendError> {
        let started = Instant::now();
        let resp = self.backends.request(&req, image).await?;
        let response = match &resp {
            BackendResponse::Text(t) => serde_json::Value::String(t.clone()),
            BackendResponse::Scores(s) => serde_json::to_value(s).unwrap_or_default(),
        };
        self.steps.push(TraceStep {
            kind,
            backend: req.kind(),
            request_digest: cache_key(&req),
            response,
            retry,
            fallback: false,
            wall_ms: started.elapsed().as_millis() as u64,
        });
        Ok(resp)
    }

    pub async fn chat(
        &mut self,
        kind: StepKind,
        messages: Vec<Message>,
        params: &ChatParams,
        retry: bool,
    ) -> Result<String, BackendError> {
        if messages.is_empty() {
            return Err(BackendError::Precondition("chat needs at least one message".into()));
        }
        let req = BackendRequest::Chat {
            messages,
            params: params.clone(),
        };
        match self.issue(kind, req, None, retry).await? {
            BackendResponse::Text(t) => Ok(t),
            BackendResponse::Scores(_) => unreachable!("payload type checked in Backends::request"),
        }
    }

    pub async fn caption(&mut self, image: &ImageRef) -> Result<String, BackendError> {
        let req = BackendRequest::Caption {
            image_digest: image.digest.clone(),
        };
        match self.issue(StepKind::Caption, req, Some(image), false).await? {
            BackendResponse::Text(t) if !t.trim().is_empty() => Ok(t.trim().to_string()),
            _ => Err(BackendError::EmptyCaption),
        }
    }

    pub async fn vqa(&mut self, image: &ImageRef, question: &str) -> Result<String, BackendError> {
        if question.trim().is_empty() {
            return Err(BackendError::Precondition("vqa question is empty".into()));
        }
        let req = BackendRequest::Vqa {
            image_digest: image.digest.clone(),
            question: question.to_string(),
        };
        match self.issue(StepKind::VqaClue, req, Some(image), false).await? {
            BackendResponse::Text(t) => Ok(t),
            BackendResponse::Scores(_) => unreachable!("payload type checked in Backends::request"),
        }
    }

    /// One score per text, in input order; `combined` is computed here.
    pub async fn align(
        &mut self,
        kind: StepKind,
        image: &ImageRef,
        texts: &[String],
    ) -> Result<Vec<AlignmentScore>, BackendError> {
        if texts.is_empty() || texts.iter().any(|t| t.trim().is_empty()) {
            return Err(BackendError::Precondition(
                "align needs a non-empty list of non-empty texts".into(),
            ));
        }
        let req = BackendRequest::Align {
            image_digest: image.digest.clone(),
            texts: texts.to_vec(),
        };
        match self.issue(kind, req, Some(image), false).await? {
            BackendResponse::Scores(raw) if raw.len() == texts.len() => Ok(raw
                .into_iter()
                .map(|s| AlignmentScore::new(s.itm, s.itc))
                .collect()),
            BackendResponse::Scores(raw) => Err(BackendError::LengthMismatch {
                expected: texts.len(),
                got: raw.len(),
            }),
            BackendResponse::Text(_) => unreachable!("payload type checked in Backends::request"),
        }
    }
}
