//! HTTP backends: a chat-completions LLM endpoint and the VLM gateway.

use std::time::Duration;

use async_trait::async_trait;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{Backend, BackendError, BackendRequest, BackendResponse, RawScore};
use crate::domain::{ImageRef, RequestKind};

pub const LLM_KEY_ENV: &str = "VICOR_LLM_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    /// Total attempts, first one included.
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay_ms: 250,
            max_delay_ms: 8_000,
        }
    }
}

impl RetryPolicy {
    /// Exponential backoff with full jitter for the given (1-based) failed attempt.
    fn delay(&self, attempt: u32) -> Duration {
        let cap = self
            .base_delay_ms
            .saturating_mul(1u64 << attempt.saturating_sub(1).min(16))
            .min(self.max_delay_ms);
        if cap == 0 {
            return Duration::ZERO;
        }
        Duration::from_millis(rand::rng().random_range(cap / 2..=cap))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpConfig {
    /// Base URL; `/chat/completions` is appended.
    pub llm_endpoint: Option<String>,
    /// Base URL of the VLM gateway; `/v1/...` is appended.
    pub gateway_endpoint: Option<String>,
    /// Never serialized; read from the environment.
    #[serde(skip)]
    pub api_key: Option<String>,
    pub timeout_secs: Option<u64>,
    pub retry: RetryPolicy,
}

impl HttpConfig {
    pub fn with_env_key(mut self) -> Self {
        self.api_key = std::env::var(LLM_KEY_ENV).ok().filter(|k| !k.is_empty());
        self
    }
}

pub struct HttpBackend {
    client: reqwest::Client,
    cfg: HttpConfig,
}

#[derive(Deserialize)]
struct ChatCompletion {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    content: Option<String>,
}

#[derive(Deserialize)]
struct CaptionReply {
    caption: String,
}

#[derive(Deserialize)]
struct VqaReply {
    answer: String,
}

#[derive(Deserialize)]
struct AlignReply {
    scores: Vec<RawScore>,
}

enum Failure {
    Retryable(String),
    Fatal(BackendError),
}

impl HttpBackend {
    pub fn new(cfg: HttpConfig) -> Result<Self, BackendError> {
        let mut builder = reqwest::Client::builder();
        if let Some(secs) = cfg.timeout_secs {
            builder = builder.timeout(Duration::from_secs(secs));
        }
        let client = builder
            .build()
            .map_err(|e| BackendError::Precondition(format!("http client: {e}")))?;
        Ok(Self { client, cfg })
    }

    fn endpoint(&self, kind: RequestKind) -> Result<String, BackendError> {
        let base = match kind {
            RequestKind::Chat => self.cfg.llm_endpoint.as_deref(),
            _ => self.cfg.gateway_endpoint.as_deref(),
        }
        .ok_or(BackendError::Unsupported(kind))?
        .trim_end_matches('/');
        Ok(match kind {
            RequestKind::Chat => format!("{base}/chat/completions"),
            RequestKind::Caption => format!("{base}/v1/caption"),
            RequestKind::Vqa => format!("{base}/v1/vqa"),
            RequestKind::Align => format!("{base}/v1/align"),
        })
    }

    fn body(req: &BackendRequest, image: Option<&ImageRef>) -> Result<serde_json::Value, BackendError> {
        let image_b64 = || -> Result<String, BackendError> {
            image
                .ok_or_else(|| BackendError::Precondition("image bytes required".into()))?
                .base64()
                .map_err(BackendError::Image)
        };
        Ok(match req {
            BackendRequest::Chat { messages, params } => json!({
                "model": params.model_name,
                "messages": messages,
                "temperature": params.temperature,
                "max_tokens": params.max_tokens,
            }),
            BackendRequest::Caption { .. } => json!({ "image_b64": image_b64()? }),
            BackendRequest::Vqa { question, .. } => {
                json!({ "image_b64": image_b64()?, "question": question })
            }
            BackendRequest::Align { texts, .. } => {
                json!({ "image_b64": image_b64()?, "texts": texts })
            }
        })
    }

    async fn attempt(&self, url: &str, body: &serde_json::Value, with_key: bool) -> Result<String, Failure> {
        let mut rb = self.client.post(url).json(body);
        if with_key {
            if let Some(key) = &self.cfg.api_key {
                rb = rb.bearer_auth(key);
            }
        }
        let resp = rb.send().await.map_err(|e| Failure::Retryable(e.to_string()))?;
        let status = resp.status();
        let text = resp
            .text()
            .await
            .map_err(|e| Failure::Retryable(e.to_string()))?;
        if status.is_server_error() {
            return Err(Failure::Retryable(format!("HTTP {status}: {text}")));
        }
        if !status.is_success() {
            return Err(Failure::Fatal(BackendError::Rejected {
                status: status.as_u16(),
                body: text,
            }));
        }
        Ok(text)
    }

    async fn post_with_retry(&self, url: &str, body: &serde_json::Value, with_key: bool) -> Result<String, BackendError> {
        let max = self.cfg.retry.max_attempts.max(1);
        let mut last = String::new();
        for attempt in 1..=max {
            match self.attempt(url, body, with_key).await {
                Ok(text) => return Ok(text),
                Err(Failure::Fatal(e)) => return Err(e),
                Err(Failure::Retryable(msg)) => {
                    tracing::warn!(url, attempt, error = %msg, "backend call failed");
                    last = msg;
                    if attempt < max {
                        tokio::time::sleep(self.cfg.retry.delay(attempt)).await;
                    }
                }
            }
        }
        Err(BackendError::BackendUnavailable { attempts: max, last })
    }
}

fn decode<T: for<'de> Deserialize<'de>>(text: &str) -> Result<T, BackendError> {
    serde_json::from_str(text).map_err(|e| BackendError::MalformedResponse(format!("{e}: {text}")))
}

#[async_trait]
impl Backend for HttpBackend {
    async fn call(
        &self,
        req: &BackendRequest,
        image: Option<&ImageRef>,
    ) -> Result<BackendResponse, BackendError> {
        let kind = req.kind();
        let url = self.endpoint(kind)?;
        let body = Self::body(req, image)?;
        let text = self.post_with_retry(&url, &body, kind == RequestKind::Chat).await?;
        Ok(match kind {
            RequestKind::Chat => {
                let parsed: ChatCompletion = decode(&text)?;
                let content = parsed
                    .choices
                    .into_iter()
                    .next()
                    .and_then(|c| c.message.content)
                    .ok_or_else(|| BackendError::MalformedResponse("no choices in completion".into()))?;
                BackendResponse::Text(content)
            }
            RequestKind::Caption => BackendResponse::Text(decode::<CaptionReply>(&text)?.caption),
            RequestKind::Vqa => BackendResponse::Text(decode::<VqaReply>(&text)?.answer),
            RequestKind::Align => BackendResponse::Scores(decode::<AlignReply>(&text)?.scores),
        })
    }
}
