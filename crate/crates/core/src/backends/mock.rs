//! In-process transports: scripted responses, echo, closures and replay.
//!
//! Script files are JSON. An object maps request digests (hex) to
//! responses, with `"*"` as the fallback for unmatched requests; an array
//! is served in call order. A string response is wrapped in the
//! chat-completions shape. A response of the form
//! `{"$transport_error": "..."}` fails the attempt with a retryable error.

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde_json::Value;

use super::{chat_message_text, chat_response, BackendRequest, CallError, LedgerEntry, Transport};
use crate::digest::Digest;

#[derive(Debug, thiserror::Error)]
pub enum ScriptError {
    #[error("cannot read script {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("script {path} is not valid: {reason}")]
    Invalid { path: String, reason: String },
}

fn materialize(value: &Value) -> Result<Value, CallError> {
    match value {
        Value::String(text) => Ok(chat_response(text)),
        Value::Object(map) if map.contains_key("$transport_error") => Err(CallError::Transport(
            map["$transport_error"].as_str().unwrap_or("scripted failure").to_string(),
        )),
        other => Ok(other.clone()),
    }
}

/// Answers from a fixed script; a pure function of the request digest
/// unless built from an ordered sequence.
#[derive(Debug)]
pub struct ScriptedTransport {
    endpoint: String,
    by_digest: HashMap<Digest, Value>,
    fallback: Option<Value>,
    sequence: Vec<Value>,
    cursor: AtomicUsize,
}

impl ScriptedTransport {
    fn empty(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            by_digest: HashMap::new(),
            fallback: None,
            sequence: Vec::new(),
            cursor: AtomicUsize::new(0),
        }
    }

    pub fn from_map(endpoint: impl Into<String>, entries: impl IntoIterator<Item = (Digest, Value)>) -> Self {
        let mut t = Self::empty(endpoint);
        t.by_digest = entries.into_iter().collect();
        t
    }

    /// Same response for every request.
    pub fn fallback(endpoint: impl Into<String>, response: Value) -> Self {
        let mut t = Self::empty(endpoint);
        t.fallback = Some(response);
        t
    }

    pub fn sequence(endpoint: impl Into<String>, responses: Vec<Value>) -> Self {
        let mut t = Self::empty(endpoint);
        t.sequence = responses;
        t
    }

    pub fn with_fallback(mut self, response: Value) -> Self {
        self.fallback = Some(response);
        self
    }

    pub fn from_json(endpoint: impl Into<String>, script: &Value) -> Result<Self, String> {
        match script {
            Value::Array(items) => Ok(Self::sequence(endpoint, items.clone())),
            Value::Object(map) => {
                let mut t = Self::empty(endpoint);
                for (key, response) in map {
                    if key == "*" {
                        t.fallback = Some(response.clone());
                    } else {
                        let digest: Digest = key.parse().map_err(|e| format!("key {key:?}: {e}"))?;
                        t.by_digest.insert(digest, response.clone());
                    }
                }
                Ok(t)
            }
            _ => Err("expected a JSON object or array".into()),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScriptError> {
        let path = path.as_ref();
        let shown = path.display().to_string();
        let text =
            std::fs::read_to_string(path).map_err(|source| ScriptError::Io { path: shown.clone(), source })?;
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| ScriptError::Invalid { path: shown.clone(), reason: e.to_string() })?;
        Self::from_json(format!("script:{shown}"), &value)
            .map_err(|reason| ScriptError::Invalid { path: shown, reason })
    }
}

impl Transport for ScriptedTransport {
    fn endpoint_id(&self) -> &str {
        &self.endpoint
    }

    fn send(&self, request: &BackendRequest) -> Result<Value, CallError> {
        if let Some(v) = self.by_digest.get(&request.digest) {
            return materialize(v);
        }
        if !self.sequence.is_empty() {
            let i = self.cursor.fetch_add(1, Ordering::SeqCst);
            if let Some(v) = self.sequence.get(i) {
                return materialize(v);
            }
        }
        match &self.fallback {
            Some(v) => materialize(v),
            None => Err(CallError::Protocol(format!("no scripted response for {}", request.digest))),
        }
    }
}

/// Chat transport that answers with the request's user message verbatim.
#[derive(Debug)]
pub struct EchoTransport {
    endpoint: String,
}

impl EchoTransport {
    pub fn new() -> Self {
        Self { endpoint: "echo".into() }
    }
}

impl Default for EchoTransport {
    fn default() -> Self {
        Self::new()
    }
}

impl Transport for EchoTransport {
    fn endpoint_id(&self) -> &str {
        &self.endpoint
    }

    fn send(&self, request: &BackendRequest) -> Result<Value, CallError> {
        chat_message_text(&request.body, "user")
            .map(|text| chat_response(&text))
            .ok_or_else(|| CallError::Protocol("request has no user message".into()))
    }
}

type Handler = dyn Fn(&BackendRequest) -> Result<Value, CallError> + Send + Sync;

/// Transport backed by a closure.
pub struct FnTransport {
    endpoint: String,
    seeds: bool,
    handler: Box<Handler>,
}

impl FnTransport {
    pub fn new(
        endpoint: impl Into<String>,
        handler: impl Fn(&BackendRequest) -> Result<Value, CallError> + Send + Sync + 'static,
    ) -> Self {
        Self { endpoint: endpoint.into(), seeds: false, handler: Box::new(handler) }
    }

    pub fn with_seed_support(mut self, supported: bool) -> Self {
        self.seeds = supported;
        self
    }
}

impl Transport for FnTransport {
    fn endpoint_id(&self) -> &str {
        &self.endpoint
    }

    fn supports_seed(&self) -> bool {
        self.seeds
    }

    fn send(&self, request: &BackendRequest) -> Result<Value, CallError> {
        (self.handler)(request)
    }
}

/// Serves responses recorded in a ledger, keyed by request digest.
#[derive(Debug)]
pub struct ReplayTransport {
    endpoint: String,
    responses: HashMap<Digest, Value>,
    seeds: bool,
}

impl ReplayTransport {
    pub fn new<'a>(endpoint: String, entries: impl IntoIterator<Item = &'a LedgerEntry>) -> Self {
        let mut responses = HashMap::new();
        let mut seeds = true;
        for e in entries {
            // Requests must hash as they did when recorded, seeds included.
            if e.note.as_deref().is_some_and(|n| n.contains("seed") && n.contains("dropped")) {
                seeds = false;
            }
            if let Some(r) = &e.response {
                responses.insert(e.digest, r.clone());
            }
        }
        Self { endpoint, responses, seeds }
    }
}

impl Transport for ReplayTransport {
    fn endpoint_id(&self) -> &str {
        &self.endpoint
    }

    fn supports_seed(&self) -> bool {
        self.seeds
    }

    fn send(&self, request: &BackendRequest) -> Result<Value, CallError> {
        self.responses
            .get(&request.digest)
            .cloned()
            .ok_or_else(|| CallError::Protocol(format!("no recorded response for {}", request.digest)))
    }
}
