//! Backend roles, the transport abstraction and the typed calls the
//! pipeline makes.
//!
//! Every call goes through [`Backend::call`], which layers the response
//! cache, the per-role in-flight limit, retries and the call ledger over a
//! [`Transport`]. Transports only move JSON: [`HttpTransport`] speaks to
//! real servers, the types in [`mock`] answer in-process.

use std::fmt;
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::digest::Digest;
use crate::geometry::{BBox, ObjectProposal};
use crate::imaging::{RegionPayload, SourceImage};
use crate::store::{CacheEntry, ResponseCache, StoreError};

mod http;
mod ledger;
pub mod mock;
pub mod rules;

pub use http::HttpTransport;
pub use ledger::{CallSource, Ledger, LedgerEntry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendRole {
    Captioner,
    ConciseCaptioner,
    TextLlm,
    Detector,
    ItmScorer,
}

impl BackendRole {
    pub const ALL: [BackendRole; 5] = [
        BackendRole::Captioner,
        BackendRole::ConciseCaptioner,
        BackendRole::TextLlm,
        BackendRole::Detector,
        BackendRole::ItmScorer,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BackendRole::Captioner => "captioner",
            BackendRole::ConciseCaptioner => "concise_captioner",
            BackendRole::TextLlm => "text_llm",
            BackendRole::Detector => "detector",
            BackendRole::ItmScorer => "itm_scorer",
        }
    }

    /// Environment variable holding the bearer token for this role.
    pub fn api_key_var(self) -> String {
        format!("PATCHCAP_{}_API_KEY", self.as_str().to_uppercase())
    }

    pub fn speaks_chat(self) -> bool {
        matches!(self, BackendRole::Captioner | BackendRole::ConciseCaptioner | BackendRole::TextLlm)
    }
}

impl fmt::Display for BackendRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Image-text agreement as served by the scorer: the fused value is the
/// mean of the similarity and the matching score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ItmScore {
    pub sim: f64,
    #[serde(rename = "match")]
    pub matching: f64,
    pub fused: f64,
}

impl ItmScore {
    pub fn new(sim: f64, matching: f64) -> Self {
        Self { sim, matching, fused: (sim + matching) / 2.0 }
    }
}

/// A request as the cache and ledger see it. `sample` distinguishes repeated
/// draws of an otherwise identical body (the k candidates of one patch).
#[derive(Debug, Clone, PartialEq)]
pub struct BackendRequest {
    pub role: BackendRole,
    pub endpoint: String,
    pub body: Value,
    pub sample: u32,
    pub digest: Digest,
}

impl BackendRequest {
    pub fn new(role: BackendRole, endpoint: impl Into<String>, body: Value, sample: u32) -> Self {
        let digest = request_digest(&body, sample);
        Self { role, endpoint: endpoint.into(), body, sample, digest }
    }
}

pub fn request_digest(body: &Value, sample: u32) -> Digest {
    Digest::of_json(&json!({ "body": body, "sample": sample }))
}

/// Failure reported by a transport for a single attempt.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CallError {
    /// Worth retrying: connection failures, timeouts, 5xx and 429.
    #[error("transport: {0}")]
    Transport(String),
    /// The server answered but broke the contract.
    #[error("protocol: {0}")]
    Protocol(String),
}

pub trait Transport: Send + Sync {
    fn endpoint_id(&self) -> &str;

    fn supports_seed(&self) -> bool {
        false
    }

    fn send(&self, request: &BackendRequest) -> Result<Value, CallError>;
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("no backend bound for role {0}")]
    Unbound(BackendRole),
    #[error("{role}: invalid request: {message}")]
    InvalidRequest { role: BackendRole, message: String },
    #[error("{role}: protocol error: {message}")]
    Protocol { role: BackendRole, message: String },
    #[error("{role}: gave up after {attempts} attempts: {last}")]
    Exhausted { role: BackendRole, attempts: u32, last: String },
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
    pub jitter: bool,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_retries: 3, base_delay_ms: 250, max_delay_ms: 8_000, jitter: true }
    }
}

impl RetryPolicy {
    pub fn immediate(max_retries: u32) -> Self {
        Self { max_retries, base_delay_ms: 0, max_delay_ms: 0, jitter: false }
    }

    /// Delay before retry number `retry` (1-based). Jitter is drawn from a
    /// generator seeded by the request digest so schedules are repeatable.
    pub fn delay(&self, retry: u32, digest: &Digest) -> Duration {
        let exp = self.base_delay_ms.saturating_mul(1u64 << (retry - 1).min(20));
        let capped = exp.min(self.max_delay_ms);
        let ms = if self.jitter && capped > 0 {
            let mut seed = [0u8; 32];
            seed.copy_from_slice(digest.as_bytes());
            seed[0] ^= retry as u8;
            let mut rng = ChaCha8Rng::from_seed(seed);
            capped / 2 + rng.gen_range(0..=capped / 2)
        } else {
            capped
        };
        Duration::from_millis(ms)
    }
}

/// Counting semaphore bounding in-flight requests for one role.
struct Gate {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Gate);

impl Gate {
    fn new(n: usize) -> Self {
        Self { free: Mutex::new(n.max(1)), cv: Condvar::new() }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().expect("gate lock");
        while *free == 0 {
            free = self.cv.wait(free).expect("gate lock");
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("gate lock") += 1;
        self.0.cv.notify_one();
    }
}

/// One role's client: transport plus cache, concurrency limit and retries.
pub struct Backend {
    role: BackendRole,
    transport: Arc<dyn Transport>,
    model: String,
    retry: RetryPolicy,
    gate: Arc<Gate>,
    cache: Option<Arc<ResponseCache>>,
}

impl fmt::Debug for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Backend")
            .field("role", &self.role)
            .field("endpoint", &self.transport.endpoint_id())
            .field("model", &self.model)
            .finish()
    }
}

impl Backend {
    pub fn new(role: BackendRole, transport: Arc<dyn Transport>) -> Self {
        Self {
            role,
            transport,
            model: "default".into(),
            retry: RetryPolicy::default(),
            gate: Arc::new(Gate::new(8)),
            cache: None,
        }
    }

    pub fn with_model(mut self, model: impl Into<String>) -> Self {
        self.model = model.into();
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_max_inflight(mut self, n: usize) -> Self {
        self.gate = Arc::new(Gate::new(n));
        self
    }

    pub fn with_cache(mut self, cache: Option<Arc<ResponseCache>>) -> Self {
        self.cache = cache;
        self
    }

    pub fn role(&self) -> BackendRole {
        self.role
    }

    pub fn endpoint_id(&self) -> &str {
        self.transport.endpoint_id()
    }

    pub fn model(&self) -> &str {
        &self.model
    }

    pub fn supports_seed(&self) -> bool {
        self.transport.supports_seed()
    }

    /// Issues one logical request. `parse` validates the response; a
    /// rejected response is a protocol error and is neither retried nor
    /// cached.
    pub fn call<T>(
        &self,
        ledger: &Ledger,
        body: Value,
        sample: u32,
        note: Option<String>,
        parse: impl Fn(&Value) -> Result<T, String>,
    ) -> Result<T, BackendError> {
        let request = BackendRequest::new(self.role, self.endpoint_id(), body, sample);
        let started = Instant::now();

        if let Some(cache) = &self.cache {
            if let Some(bytes) = cache.get(self.role, self.endpoint_id(), &request.digest)? {
                if let Ok(value) = serde_json::from_slice::<Value>(&bytes) {
                    if let Ok(parsed) = parse(&value) {
                        ledger.push(LedgerEntry::new(&request, CallSource::Cache, 0, started, Ok(value), note));
                        return Ok(parsed);
                    }
                }
                log::warn!("{}: ignoring unusable cached response {}", self.role, request.digest);
            }
        }

        let _permit = self.gate.acquire();
        let mut attempts = 0;
        loop {
            attempts += 1;
            let outcome = self.transport.send(&request);
            let failure = match outcome {
                Ok(value) => match parse(&value) {
                    Ok(parsed) => {
                        if let Some(cache) = &self.cache {
                            let bytes = crate::digest::canonical_json(&value).into_bytes();
                            let entry = CacheEntry::new(self.role, self.endpoint_id(), request.digest, bytes);
                            if let Err(e) = cache.put(&entry) {
                                log::warn!("{}: cache write failed: {e}", self.role);
                            }
                        }
                        ledger.push(LedgerEntry::new(&request, CallSource::Live, attempts, started, Ok(value), note));
                        return Ok(parsed);
                    }
                    Err(message) => CallError::Protocol(message),
                },
                Err(e) => e,
            };
            match failure {
                CallError::Protocol(message) => {
                    ledger.push(LedgerEntry::new(
                        &request,
                        CallSource::Live,
                        attempts,
                        started,
                        Err(format!("protocol: {message}")),
                        note,
                    ));
                    return Err(BackendError::Protocol { role: self.role, message });
                }
                CallError::Transport(message) if attempts > self.retry.max_retries => {
                    ledger.push(LedgerEntry::new(
                        &request,
                        CallSource::Live,
                        attempts,
                        started,
                        Err(format!("transport: {message}")),
                        note,
                    ));
                    return Err(BackendError::Exhausted { role: self.role, attempts, last: message });
                }
                CallError::Transport(message) => {
                    log::debug!("{}: attempt {attempts} failed: {message}", self.role);
                    std::thread::sleep(self.retry.delay(attempts, &request.digest));
                }
            }
        }
    }
}

/// The backends bound for a run, one optional client per role.
#[derive(Debug, Default)]
pub struct BackendSet {
    pub captioner: Option<Backend>,
    pub concise_captioner: Option<Backend>,
    pub text_llm: Option<Backend>,
    pub detector: Option<Backend>,
    pub itm_scorer: Option<Backend>,
}

impl BackendSet {
    pub fn get(&self, role: BackendRole) -> Result<&Backend, BackendError> {
        let slot = match role {
            BackendRole::Captioner => &self.captioner,
            BackendRole::ConciseCaptioner => &self.concise_captioner,
            BackendRole::TextLlm => &self.text_llm,
            BackendRole::Detector => &self.detector,
            BackendRole::ItmScorer => &self.itm_scorer,
        };
        slot.as_ref().ok_or(BackendError::Unbound(role))
    }

    pub fn set(&mut self, backend: Backend) {
        let slot = match backend.role {
            BackendRole::Captioner => &mut self.captioner,
            BackendRole::ConciseCaptioner => &mut self.concise_captioner,
            BackendRole::TextLlm => &mut self.text_llm,
            BackendRole::Detector => &mut self.detector,
            BackendRole::ItmScorer => &mut self.itm_scorer,
        };
        *slot = Some(backend);
    }

    pub fn with(mut self, backend: Backend) -> Self {
        self.set(backend);
        self
    }

    /// Attaches `cache` to every bound backend.
    pub fn with_cache(self, cache: Option<Arc<ResponseCache>>) -> Self {
        let attach = |b: Option<Backend>| b.map(|b| b.with_cache(cache.clone()));
        Self {
            captioner: attach(self.captioner),
            concise_captioner: attach(self.concise_captioner),
            text_llm: attach(self.text_llm),
            detector: attach(self.detector),
            itm_scorer: attach(self.itm_scorer),
        }
    }

    pub fn session<'a>(&'a self, ledger: &'a Ledger) -> Session<'a> {
        Session { backends: self, ledger }
    }

    /// Backends that answer from a recorded ledger instead of live servers.
    pub fn replay(entries: &[LedgerEntry]) -> Self {
        let mut set = BackendSet::default();
        for role in BackendRole::ALL {
            let recorded: Vec<&LedgerEntry> = entries.iter().filter(|e| e.role == role).collect();
            let Some(first) = recorded.first() else { continue };
            let transport = mock::ReplayTransport::new(first.endpoint.clone(), recorded.iter().copied());
            let model = first.model.clone().unwrap_or_else(|| "default".into());
            set.set(
                Backend::new(role, Arc::new(transport))
                    .with_model(model)
                    .with_retry(RetryPolicy::immediate(0)),
            );
        }
        set
    }
}

/// Typed backend calls recorded into one ledger.
#[derive(Clone, Copy)]
pub struct Session<'a> {
    backends: &'a BackendSet,
    ledger: &'a Ledger,
}

impl<'a> Session<'a> {
    pub fn ledger(&self) -> &'a Ledger {
        self.ledger
    }

    pub fn backends(&self) -> &'a BackendSet {
        self.backends
    }

    /// Describe a region with a captioning model.
    pub fn caption(
        &self,
        role: BackendRole,
        region: &RegionPayload,
        prompt: &str,
        temperature: f64,
        seed: Option<u64>,
        sample: u32,
    ) -> Result<String, BackendError> {
        if !matches!(role, BackendRole::Captioner | BackendRole::ConciseCaptioner) {
            return Err(BackendError::InvalidRequest { role, message: "not a captioning role".into() });
        }
        if prompt.trim().is_empty() {
            return Err(BackendError::InvalidRequest { role, message: "empty prompt".into() });
        }
        let backend = self.backends.get(role)?;
        let mut body = json!({
            "model": backend.model(),
            "messages": [{
                "role": "user",
                "content": [
                    {"type": "text", "text": prompt},
                    {"type": "image_url", "image_url": {"url": region.data_url()}},
                ],
            }],
            "temperature": temperature,
        });
        let mut note = None;
        if let Some(seed) = seed {
            if backend.supports_seed() {
                body["seed"] = json!(seed);
            } else {
                note = Some(format!("seed {seed} dropped: endpoint does not accept seeds"));
            }
        }
        backend.call(self.ledger, body, sample, note, |v| {
            let text = chat_content(v)?;
            if text.trim().is_empty() {
                Err("empty caption".into())
            } else {
                Ok(text)
            }
        })
    }

    /// Plain text completion with the aggregation LLM.
    pub fn complete(&self, system: &str, user: &str, temperature: f64) -> Result<String, BackendError> {
        let role = BackendRole::TextLlm;
        if user.trim().is_empty() {
            return Err(BackendError::InvalidRequest { role, message: "empty user prompt".into() });
        }
        let backend = self.backends.get(role)?;
        let body = json!({
            "model": backend.model(),
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
            "temperature": temperature,
        });
        backend.call(self.ledger, body, 0, None, chat_content)
    }

    pub fn detect(&self, img: &SourceImage) -> Result<Vec<ObjectProposal>, BackendError> {
        let backend = self.backends.get(BackendRole::Detector)?;
        let region = img.full_region().map_err(|e| BackendError::InvalidRequest {
            role: BackendRole::Detector,
            message: e.to_string(),
        })?;
        let body = json!({ "image_b64": region.encoded });
        let extent = img.extent;
        backend.call(self.ledger, body, 0, None, |v| {
            let raw = v
                .get("proposals")
                .and_then(Value::as_array)
                .ok_or_else(|| "missing `proposals` array".to_string())?;
            raw.iter()
                .map(|p| {
                    let label = p.get("label").and_then(Value::as_str).ok_or("proposal without label")?;
                    let coords: [u32; 4] = serde_json::from_value(p.get("box").cloned().unwrap_or(Value::Null))
                        .map_err(|e| format!("bad box for {label}: {e}"))?;
                    let bbox = BBox::try_from(coords).map_err(|e| e.to_string())?;
                    if !bbox.within(extent) {
                        return Err(format!(
                            "box {bbox} for {label} outside {}x{} image",
                            extent.width, extent.height
                        ));
                    }
                    let confidence =
                        p.get("confidence").and_then(Value::as_f64).ok_or("proposal without confidence")?;
                    if !(0.0..=1.0).contains(&confidence) {
                        return Err(format!("confidence {confidence} outside [0, 1]"));
                    }
                    Ok(ObjectProposal { label: label.to_string(), bbox, confidence })
                })
                .collect()
        })
    }

    pub fn itm_score(&self, region: &RegionPayload, sentence: &str) -> Result<ItmScore, BackendError> {
        let role = BackendRole::ItmScorer;
        if sentence.trim().is_empty() {
            return Err(BackendError::InvalidRequest { role, message: "empty sentence".into() });
        }
        let backend = self.backends.get(role)?;
        let body = json!({ "image_b64": region.encoded, "text": sentence });
        backend.call(self.ledger, body, 0, None, |v| {
            let sim = v.get("sim").and_then(Value::as_f64).ok_or("missing numeric `sim`")?;
            let matching = v.get("match").and_then(Value::as_f64).ok_or("missing numeric `match`")?;
            Ok(ItmScore::new(sim, matching))
        })
    }
}

/// `choices[0].message.content` of a chat-completions response.
pub fn chat_content(v: &Value) -> Result<String, String> {
    v.pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| "response lacks choices[0].message.content".to_string())
}

/// Wraps text in the chat-completions response shape.
pub fn chat_response(text: &str) -> Value {
    json!({
        "object": "chat.completion",
        "choices": [{"index": 0, "message": {"role": "assistant", "content": text}, "finish_reason": "stop"}],
    })
}

/// Text of the first message with `role` in a chat request body. Handles
/// both string content and content-part arrays.
pub fn chat_message_text(body: &Value, role: &str) -> Option<String> {
    let messages = body.get("messages")?.as_array()?;
    let msg = messages.iter().find(|m| m.get("role").and_then(Value::as_str) == Some(role))?;
    match msg.get("content")? {
        Value::String(s) => Some(s.clone()),
        Value::Array(parts) => Some(
            parts
                .iter()
                .filter_map(|p| p.get("text").and_then(Value::as_str))
                .collect::<Vec<_>>()
                .join("\n"),
        ),
        _ => None,
    }
}

/// Raw bytes of the image attached to a chat or detector/scorer request.
pub fn request_image_bytes(body: &Value) -> Option<Vec<u8>> {
    use base64::engine::general_purpose::STANDARD as BASE64;
    use base64::Engine as _;

    let encoded = if let Some(b64) = body.get("image_b64").and_then(Value::as_str) {
        b64.to_string()
    } else {
        let messages = body.get("messages")?.as_array()?;
        let url = messages.iter().find_map(|m| {
            m.get("content")?.as_array()?.iter().find_map(|p| p.pointer("/image_url/url")?.as_str())
        })?;
        url.split_once("base64,")?.1.to_string()
    };
    BASE64.decode(encoded).ok()
}

#[cfg(test)]
mod tests {
    use super::mock::{EchoTransport, FnTransport, ScriptedTransport};
    use super::*;
    use crate::geometry::ImageExtent;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn region() -> RegionPayload {
        let img = SourceImage::opaque("img", b"blob".to_vec(), ImageExtent::new(10, 10));
        img.full_region().unwrap()
    }

    fn flaky(failures: usize) -> (Arc<AtomicUsize>, FnTransport) {
        let calls = Arc::new(AtomicUsize::new(0));
        let counter = Arc::clone(&calls);
        let t = FnTransport::new("flaky", move |_req| {
            let n = counter.fetch_add(1, Ordering::SeqCst);
            if n < failures {
                Err(CallError::Transport("HTTP 500".into()))
            } else {
                Ok(chat_response("ok"))
            }
        });
        (calls, t)
    }

    #[test]
    fn itm_fused_is_mean() {
        assert!((ItmScore::new(0.4, 0.2).fused - 0.3).abs() < 1e-12);
        assert_eq!(ItmScore::new(0.7, 0.7).fused, 0.7);
        assert_eq!(ItmScore::new(1.0, 0.0).fused, 0.5);
    }

    #[test]
    fn scripted_caption_by_digest() {
        let ledger = Ledger::new();
        let r = region();
        let expected_body = json!({
            "model": "default",
            "messages": [{"role": "user", "content": [
                {"type": "text", "text": "Describe this image in detail"},
                {"type": "image_url", "image_url": {"url": r.data_url()}},
            ]}],
            "temperature": 0.7,
        });
        let digest = request_digest(&expected_body, 0);
        let script = ScriptedTransport::from_map("script", [(digest, json!("a red car parked"))]);
        let set = BackendSet::default().with(Backend::new(BackendRole::Captioner, Arc::new(script)));
        let text = set
            .session(&ledger)
            .caption(BackendRole::Captioner, &r, "Describe this image in detail", 0.7, None, 0)
            .unwrap();
        assert_eq!(text, "a red car parked");
        assert_eq!(ledger.entries()[0].digest, digest);
    }

    #[test]
    fn retries_transport_errors_then_succeeds() {
        let (calls, t) = flaky(2);
        let set = BackendSet::default().with(
            Backend::new(BackendRole::Captioner, Arc::new(t)).with_retry(RetryPolicy::immediate(3)),
        );
        let ledger = Ledger::new();
        let out = set.session(&ledger).caption(BackendRole::Captioner, &region(), "p", 0.7, None, 0);
        assert_eq!(out.unwrap(), "ok");
        assert_eq!(calls.load(Ordering::SeqCst), 3);
        let entries = ledger.entries();
        assert_eq!(entries.len(), 1);
        assert_eq!(entries[0].attempts, 3);
    }

    #[test]
    fn protocol_error_is_not_retried() {
        let calls = Arc::new(AtomicUsize::new(0));
        let counter = Arc::clone(&calls);
        let t = FnTransport::new("bad", move |_| {
            counter.fetch_add(1, Ordering::SeqCst);
            Ok(json!({"unexpected": true}))
        });
        let set = BackendSet::default().with(Backend::new(BackendRole::TextLlm, Arc::new(t)));
        let ledger = Ledger::new();
        let err = set.session(&ledger).complete("s", "u", 0.0).unwrap_err();
        assert!(matches!(err, BackendError::Protocol { .. }), "{err}");
        assert_eq!(calls.load(Ordering::SeqCst), 1);
        assert_eq!(ledger.entries().len(), 1);
        assert!(ledger.entries()[0].error.is_some());
    }

    #[test]
    fn exhausted_after_max_retries() {
        let (calls, t) = flaky(usize::MAX);
        let set = BackendSet::default()
            .with(Backend::new(BackendRole::TextLlm, Arc::new(t)).with_retry(RetryPolicy::immediate(3)));
        let ledger = Ledger::new();
        let err = set.session(&ledger).complete("s", "u", 0.0).unwrap_err();
        assert!(matches!(err, BackendError::Exhausted { attempts: 4, .. }), "{err}");
        assert_eq!(calls.load(Ordering::SeqCst), 4);
    }

    #[test]
    fn echo_returns_user_prompt() {
        let set = BackendSet::default().with(Backend::new(BackendRole::TextLlm, Arc::new(EchoTransport::new())));
        let ledger = Ledger::new();
        assert_eq!(set.session(&ledger).complete("sys", "hello there", 0.0).unwrap(), "hello there");
    }

    #[test]
    fn detector_contract() {
        let img = SourceImage::opaque("img", b"x".to_vec(), ImageExtent::new(100, 100));
        let two = json!({"proposals": [
            {"label": "dog", "box": [1, 2, 30, 40], "confidence": 0.9},
            {"label": "cat", "box": [50, 50, 99, 99], "confidence": 0.2},
        ]});
        let set = BackendSet::default()
            .with(Backend::new(BackendRole::Detector, Arc::new(ScriptedTransport::fallback("d", two))));
        let ledger = Ledger::new();
        let props = set.session(&ledger).detect(&img).unwrap();
        assert_eq!(props.len(), 2);
        assert_eq!(props[0].label, "dog");
        assert_eq!(props[1].bbox, BBox::new(50, 50, 99, 99).unwrap());

        let empty = BackendSet::default().with(Backend::new(
            BackendRole::Detector,
            Arc::new(ScriptedTransport::fallback("d", json!({"proposals": []}))),
        ));
        assert!(empty.session(&ledger).detect(&img).unwrap().is_empty());

        let outside = BackendSet::default().with(Backend::new(
            BackendRole::Detector,
            Arc::new(ScriptedTransport::fallback(
                "d",
                json!({"proposals": [{"label": "x", "box": [0, 0, 101, 50], "confidence": 0.5}]}),
            )),
        ));
        assert!(matches!(outside.session(&ledger).detect(&img), Err(BackendError::Protocol { .. })));
    }

    #[test]
    fn scorer_contract() {
        let set = BackendSet::default().with(Backend::new(
            BackendRole::ItmScorer,
            Arc::new(ScriptedTransport::fallback("s", json!({"sim": 0.4, "match": 0.2}))),
        ));
        let ledger = Ledger::new();
        let score = set.session(&ledger).itm_score(&region(), "a dog").unwrap();
        assert!((score.fused - 0.3).abs() < 1e-12);
        assert!(matches!(
            set.session(&ledger).itm_score(&region(), "  "),
            Err(BackendError::InvalidRequest { .. })
        ));
    }

    #[test]
    fn seed_dropped_and_noted_without_support() {
        let set = BackendSet::default().with(Backend::new(
            BackendRole::Captioner,
            Arc::new(ScriptedTransport::fallback("c", json!("text"))),
        ));
        let ledger = Ledger::new();
        set.session(&ledger).caption(BackendRole::Captioner, &region(), "p", 0.7, Some(5), 0).unwrap();
        let entry = &ledger.entries()[0];
        assert!(entry.note.as_deref().unwrap().contains("seed 5 dropped"));
    }

    #[test]
    fn unbound_role_reported() {
        let set = BackendSet::default();
        let ledger = Ledger::new();
        assert!(matches!(
            set.session(&ledger).complete("s", "u", 0.0),
            Err(BackendError::Unbound(BackendRole::TextLlm))
        ));
    }

    #[test]
    fn cache_serves_second_call() {
        let dir = tempfile::tempdir().unwrap();
        let cache = Arc::new(ResponseCache::open(dir.path()).unwrap());
        let (calls, t) = flaky(0);
        let set = BackendSet::default()
            .with(Backend::new(BackendRole::TextLlm, Arc::new(t)).with_cache(Some(Arc::clone(&cache))));
        let ledger = Ledger::new();
        let s = set.session(&ledger);
        assert_eq!(s.complete("s", "u", 0.0).unwrap(), "ok");
        assert_eq!(s.complete("s", "u", 0.0).unwrap(), "ok");
        assert_eq!(calls.load(Ordering::SeqCst), 1);
        assert_eq!(ledger.live_calls(), 1);
        assert_eq!(ledger.entries()[1].source, CallSource::Cache);
    }

    #[test]
    fn in_flight_bounded_by_gate() {
        let current = Arc::new(AtomicUsize::new(0));
        let peak = Arc::new(AtomicUsize::new(0));
        let (c, p) = (Arc::clone(&current), Arc::clone(&peak));
        let t = FnTransport::new("slow", move |_| {
            let now = c.fetch_add(1, Ordering::SeqCst) + 1;
            p.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(Duration::from_millis(10));
            c.fetch_sub(1, Ordering::SeqCst);
            Ok(chat_response("x"))
        });
        let set = Arc::new(
            BackendSet::default().with(Backend::new(BackendRole::TextLlm, Arc::new(t)).with_max_inflight(2)),
        );
        let handles: Vec<_> = (0..8)
            .map(|i| {
                let set = Arc::clone(&set);
                std::thread::spawn(move || {
                    let ledger = Ledger::new();
                    set.session(&ledger).complete("s", &format!("u{i}"), 0.0).unwrap();
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert!(peak.load(Ordering::SeqCst) <= 2);
    }

    #[test]
    fn backoff_schedule() {
        let policy = RetryPolicy { max_retries: 5, base_delay_ms: 100, max_delay_ms: 1000, jitter: false };
        let d = Digest::of(b"x");
        assert_eq!(policy.delay(1, &d), Duration::from_millis(100));
        assert_eq!(policy.delay(3, &d), Duration::from_millis(400));
        assert_eq!(policy.delay(6, &d), Duration::from_millis(1000));
        let jittered = RetryPolicy { jitter: true, ..policy };
        let a = jittered.delay(2, &d);
        assert_eq!(a, jittered.delay(2, &d));
        assert!(a >= Duration::from_millis(100) && a <= Duration::from_millis(200));
    }
}
