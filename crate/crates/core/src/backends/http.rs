use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde_json::Value;

use super::{BackendRequest, BackendRole, CallError, Transport};

/// JSON-over-HTTP transport. Chat roles post to
/// `{base_url}/v1/chat/completions`, the detector to `{base_url}/detect`
/// and the scorer to `{base_url}/itm`.
#[derive(Debug, Clone)]
pub struct HttpTransport {
    client: Client,
    url: String,
    api_key: Option<String>,
    supports_seed: bool,
}

impl HttpTransport {
    pub fn new(role: BackendRole, base_url: &str, timeout: Duration) -> Result<Self, reqwest::Error> {
        let base = base_url.trim_end_matches('/');
        let path = match role {
            BackendRole::Captioner | BackendRole::ConciseCaptioner | BackendRole::TextLlm => {
                "/v1/chat/completions"
            }
            BackendRole::Detector => "/detect",
            BackendRole::ItmScorer => "/itm",
        };
        Ok(Self {
            client: Client::builder().timeout(timeout).build()?,
            url: format!("{base}{path}"),
            api_key: None,
            supports_seed: false,
        })
    }

    /// Reads the bearer token from `PATCHCAP_{ROLE}_API_KEY` when set.
    pub fn with_env_key(mut self, role: BackendRole) -> Self {
        self.api_key = std::env::var(role.api_key_var()).ok().filter(|k| !k.is_empty());
        self
    }

    pub fn with_api_key(mut self, key: Option<String>) -> Self {
        self.api_key = key;
        self
    }

    pub fn with_seed_support(mut self, supported: bool) -> Self {
        self.supports_seed = supported;
        self
    }

    pub fn url(&self) -> &str {
        &self.url
    }
}

fn retryable(status: StatusCode) -> bool {
    status.is_server_error()
        || status == StatusCode::TOO_MANY_REQUESTS
        || status == StatusCode::REQUEST_TIMEOUT
}

impl Transport for HttpTransport {
    fn endpoint_id(&self) -> &str {
        &self.url
    }

    fn supports_seed(&self) -> bool {
        self.supports_seed
    }

    fn send(&self, request: &BackendRequest) -> Result<Value, CallError> {
        let mut builder = self.client.post(&self.url).json(&request.body);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder.send().map_err(|e| CallError::Transport(e.to_string()))?;
        let status = response.status();
        let text = response.text().map_err(|e| CallError::Transport(e.to_string()))?;
        if !status.is_success() {
            let snippet: String = text.chars().take(200).collect();
            let message = format!("HTTP {}: {snippet}", status.as_u16());
            return Err(if retryable(status) {
                CallError::Transport(message)
            } else {
                CallError::Protocol(message)
            });
        }
        serde_json::from_str(&text).map_err(|e| CallError::Protocol(format!("response is not JSON: {e}")))
    }
}
