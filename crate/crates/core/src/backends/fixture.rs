//! Deterministic backends for tests and offline runs.
//!
//! A fixture file is a JSON object. Each key is either a request digest (see
//! [`cache_key`]) or a `pattern:` string; each value is the response payload:
//! a string for chat/caption/vqa, a list of `{itm, itc}` for align.
//!
//! Patterns are globs where `*` matches any run of characters. They are
//! matched against the request's salient text: the last message for chat,
//! the question for vqa, the texts joined by `\n` for align, and the image
//! digest for caption. A pattern only applies to requests whose payload type
//! matches its value. Digest keys win over patterns; patterns are tried in
//! file order.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::sync::{Arc, Mutex};

use async_trait::async_trait;
use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer};
use thiserror::Error;

use super::{cache_key, Backend, BackendError, BackendRequest, BackendResponse};
use crate::domain::ImageRef;

pub const PATTERN_PREFIX: &str = "pattern:";

#[derive(Debug, Error)]
pub enum FixtureParseError {
    #[error("reading fixture {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("fixture is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("duplicate fixture key `{0}`")]
    DuplicateKey(String),
}

struct OrderedEntries(Vec<(String, BackendResponse)>);

impl<'de> Deserialize<'de> for OrderedEntries {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = OrderedEntries;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a map from request digest or pattern to response")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<Self::Value, A::Error> {
                let mut out = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, BackendResponse>()? {
                    out.push((k, v));
                }
                Ok(OrderedEntries(out))
            }
        }
        d.deserialize_map(V)
    }
}

#[derive(Debug, Clone, Default)]
pub struct FixtureBackend {
    exact: HashMap<String, BackendResponse>,
    patterns: Vec<(String, BackendResponse)>,
}

impl FixtureBackend {
    pub fn from_entries(
        entries: impl IntoIterator<Item = (String, BackendResponse)>,
    ) -> Result<Self, FixtureParseError> {
        let mut me = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (key, value) in entries {
            if !seen.insert(key.clone()) {
                return Err(FixtureParseError::DuplicateKey(key));
            }
            match key.strip_prefix(PATTERN_PREFIX) {
                Some(glob) => me.patterns.push((glob.to_string(), value)),
                None => {
                    me.exact.insert(key, value);
                }
            }
        }
        Ok(me)
    }

    pub fn from_json(text: &str) -> Result<Self, FixtureParseError> {
        let OrderedEntries(entries) = serde_json::from_str(text)?;
        Self::from_entries(entries)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, FixtureParseError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| FixtureParseError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// Number of entries the fixture can serve.
    pub fn len(&self) -> usize {
        self.exact.len() + self.patterns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn lookup(&self, req: &BackendRequest) -> Result<BackendResponse, BackendError> {
        let digest = cache_key(req);
        if let Some(hit) = self.exact.get(&digest) {
            return Ok(hit.clone());
        }
        let subject = salient_text(req);
        self.patterns
            .iter()
            .find(|(glob, resp)| resp.fits(req.kind()) && glob_match(glob, &subject))
            .map(|(_, resp)| resp.clone())
            .ok_or_else(|| BackendError::MissingFixture {
                digest,
                hint: subject.chars().take(80).collect(),
            })
    }
}

#[async_trait]
impl Backend for FixtureBackend {
    async fn call(
        &self,
        req: &BackendRequest,
        _image: Option<&ImageRef>,
    ) -> Result<BackendResponse, BackendError> {
        self.lookup(req)
    }
}

fn salient_text(req: &BackendRequest) -> String {
    match req {
        BackendRequest::Chat { messages, .. } => messages
            .last()
            .map(|m| m.content.clone())
            .unwrap_or_default(),
        BackendRequest::Caption { image_digest } => image_digest.clone(),
        BackendRequest::Vqa { question, .. } => question.clone(),
        BackendRequest::Align { texts, .. } => texts.join("\n"),
    }
}

/// `*` matches any (possibly empty) run; everything else is literal.
pub fn glob_match(glob: &str, text: &str) -> bool {
    let parts: Vec<&str> = glob.split('*').collect();
    if parts.len() == 1 {
        return glob == text;
    }
    let (first, rest) = parts.split_first().expect("split yields at least one part");
    let (last, middle) = rest.split_last().expect("glob has a `*`");
    let Some(mut remaining) = text.strip_prefix(first) else {
        return false;
    };
    for part in middle {
        match remaining.find(part) {
            Some(pos) => remaining = &remaining[pos + part.len()..],
            None => return false,
        }
    }
    remaining.len() >= last.len() && remaining.ends_with(last)
}

/// Records every request that reaches the wrapped backend.
pub struct RecordingBackend {
    inner: Arc<dyn Backend>,
    seen: Mutex<Vec<String>>,
}

impl RecordingBackend {
    pub fn new(inner: Arc<dyn Backend>) -> Self {
        Self {
            inner,
            seen: Mutex::new(Vec::new()),
        }
    }

    /// Request digests in arrival order.
    pub fn observed(&self) -> Vec<String> {
        self.seen.lock().expect("recorder lock").clone()
    }

    pub fn calls(&self) -> usize {
        self.seen.lock().expect("recorder lock").len()
    }

    pub fn reset(&self) {
        self.seen.lock().expect("recorder lock").clear();
    }
}

#[async_trait]
impl Backend for RecordingBackend {
    async fn call(
        &self,
        req: &BackendRequest,
        image: Option<&ImageRef>,
    ) -> Result<BackendResponse, BackendError> {
        self.seen.lock().expect("recorder lock").push(cache_key(req));
        self.inner.call(req, image).await
    }
}
