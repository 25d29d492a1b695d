//! HTTP client for the `/score` and `/extract` protocol.

use std::sync::{Condvar, Mutex};

use log::debug;
use serde::de::DeserializeOwned;
use serde::Serialize;

use super::{
    ExtractQuery, ExtractionRequest, ExtractionResponse, Provider, ProviderError, ProviderPolicy, RawFields, ScoreQuery,
    ScoringRequest, ScoringResponse,
};

/// Environment variable holding the bearer token for the remote endpoint.
pub const TOKEN_ENV: &str = "TEXTATE_API_TOKEN";

/// Counting gate bounding requests in flight.
struct Gate {
    limit: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a Gate);

impl Gate {
    fn new(limit: usize) -> Self {
        Gate { limit: limit.max(1), active: Mutex::new(0), freed: Condvar::new() }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut active = self.active.lock().expect("gate lock");
        while *active >= self.limit {
            active = self.freed.wait(active).expect("gate lock");
        }
        *active += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.active.lock().expect("gate lock") -= 1;
        self.0.freed.notify_one();
    }
}

pub struct RemoteProvider {
    base_url: String,
    agent: ureq::Agent,
    token: Option<String>,
    gate: Gate,
}

impl RemoteProvider {
    /// Client for `base_url`, reading the token from [`TOKEN_ENV`] if set.
    pub fn new(base_url: &str, policy: &ProviderPolicy) -> Result<Self, ProviderError> {
        Self::with_token(base_url, policy, std::env::var(TOKEN_ENV).ok())
    }

    pub fn with_token(base_url: &str, policy: &ProviderPolicy, token: Option<String>) -> Result<Self, ProviderError> {
        policy.validate().map_err(ProviderError::Invalid)?;
        if !(base_url.starts_with("http://") || base_url.starts_with("https://")) {
            return Err(ProviderError::Invalid(format!("not an http(s) url: {base_url}")));
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(policy.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(RemoteProvider {
            base_url: base_url.trim_end_matches('/').to_string(),
            agent,
            token,
            gate: Gate::new(policy.max_in_flight),
        })
    }

    fn post<B: Serialize, R: DeserializeOwned>(&self, path: &str, body: &B) -> Result<R, ProviderError> {
        let url = format!("{}{path}", self.base_url);
        let _permit = self.gate.acquire();
        let mut request = self.agent.post(&url);
        if let Some(token) = &self.token {
            request = request.header("Authorization", format!("Bearer {token}"));
        }
        let mut response = request.send_json(body).map_err(|e| match e {
            ureq::Error::Timeout(_) => ProviderError::Timeout,
            other => ProviderError::Transport(other.to_string()),
        })?;
        let status = response.status().as_u16();
        let text = response.body_mut().read_to_string().map_err(|e| match e {
            ureq::Error::Timeout(_) => ProviderError::Timeout,
            other => ProviderError::Transport(other.to_string()),
        })?;
        if status != 200 {
            debug!("POST {url} returned {status}");
            return Err(ProviderError::Transport(format!("status {status}")));
        }
        serde_json::from_str(&text).map_err(|e| ProviderError::Malformed(e.to_string()))
    }
}

impl Provider for RemoteProvider {
    fn name(&self) -> &str {
        "remote"
    }

    fn score(&self, _query: &ScoreQuery<'_>, request: &ScoringRequest) -> Result<ScoringResponse, ProviderError> {
        let response: ScoringResponse = self.post("/score", request)?;
        if response.log_scores.len() != request.options.len() {
            return Err(ProviderError::Malformed("score count does not match options".into()));
        }
        Ok(response)
    }

    fn extract(&self, _query: &ExtractQuery<'_>, request: &ExtractionRequest) -> Result<RawFields, ProviderError> {
        let response: ExtractionResponse = self.post("/extract", request)?;
        Ok(response.fields)
    }
}
