use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{BackendRequest, BackendRole};
use crate::digest::Digest;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallSource {
    Live,
    Cache,
}

/// One logical backend call. Failed calls are recorded too, with `error`
/// set and no response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub role: BackendRole,
    pub endpoint: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    pub digest: Digest,
    pub sample: u32,
    pub source: CallSource,
    /// Transport attempts made; zero for cache hits.
    pub attempts: u32,
    pub latency_us: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl LedgerEntry {
    pub(crate) fn new(
        request: &BackendRequest,
        source: CallSource,
        attempts: u32,
        started: Instant,
        outcome: Result<Value, String>,
        note: Option<String>,
    ) -> Self {
        let (response, error) = match outcome {
            Ok(v) => (Some(v), None),
            Err(e) => (None, Some(e)),
        };
        Self {
            role: request.role,
            endpoint: request.endpoint.clone(),
            model: request.body.get("model").and_then(Value::as_str).map(str::to_string),
            digest: request.digest,
            sample: request.sample,
            source,
            attempts,
            latency_us: started.elapsed().as_micros() as u64,
            response,
            error,
            note,
        }
    }

    pub fn is_live(&self) -> bool {
        self.source == CallSource::Live
    }
}

/// Append-only call log, safe to share between threads.
#[derive(Debug, Default)]
pub struct Ledger {
    entries: Mutex<Vec<LedgerEntry>>,
}

impl Ledger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&self, entry: LedgerEntry) {
        self.entries.lock().expect("ledger lock").push(entry);
    }

    pub fn entries(&self) -> Vec<LedgerEntry> {
        self.entries.lock().expect("ledger lock").clone()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("ledger lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn count(&self, role: BackendRole) -> usize {
        self.entries.lock().expect("ledger lock").iter().filter(|e| e.role == role).count()
    }

    pub fn live_calls(&self) -> usize {
        self.entries.lock().expect("ledger lock").iter().filter(|e| e.is_live()).count()
    }

    pub fn into_entries(self) -> Vec<LedgerEntry> {
        self.entries.into_inner().expect("ledger lock")
    }
}
