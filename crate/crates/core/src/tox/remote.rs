//! Client for a Perspective-compatible `comments:analyze` endpoint.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde_json::{json, Value};
use tracing::warn;

use super::{CategoryScores, ScoredText, Scorer, ScorerConfig, ToxError, ToxicityCategory};

/// Request body for one analysis: every category is requested.
pub fn remote_request_body(text: &str) -> Value {
    let attrs: serde_json::Map<String, Value> = ToxicityCategory::ALL
        .iter()
        .map(|c| (c.name().to_string(), json!({})))
        .collect();
    json!({
        "comment": { "text": text },
        "languages": ["en"],
        "requestedAttributes": attrs,
    })
}

/// Reads `attributeScores.{ATTR}.summaryScore.value` for every category.
/// Missing attributes count as 0.0; out-of-range values reject the whole
/// response.
pub fn parse_remote_response(body: &[u8]) -> Result<CategoryScores, ToxError> {
    let value: Value =
        serde_json::from_slice(body).map_err(|e| ToxError::ProtocolError(format!("response is not JSON: {e}")))?;
    let attrs = value
        .get("attributeScores")
        .and_then(Value::as_object)
        .ok_or_else(|| ToxError::ProtocolError("response has no attributeScores object".into()))?;

    let mut scores = CategoryScores::zero();
    for c in ToxicityCategory::ALL {
        let Some(attr) = attrs.get(c.name()) else {
            warn!(category = c.name(), "remote scorer omitted attribute, using 0.0");
            continue;
        };
        let raw = attr
            .get("summaryScore")
            .and_then(|s| s.get("value"))
            .ok_or_else(|| ToxError::ProtocolError(format!("{c} has no summaryScore.value")))?;
        let v = raw
            .as_f64()
            .ok_or_else(|| ToxError::ProtocolError(format!("{c} summary score is not a number")))?;
        scores
            .set(c, v)
            .map_err(|e| ToxError::ProtocolError(e.to_string()))?;
    }
    Ok(scores)
}

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
struct InFlight {
    used: Mutex<usize>,
    freed: Condvar,
    cap: usize,
}

struct Permit<'a>(&'a InFlight);

impl InFlight {
    fn acquire(&self) -> Permit<'_> {
        let mut used = self.used.lock().unwrap();
        while *used >= self.cap {
            used = self.freed.wait(used).unwrap();
        }
        *used += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.used.lock().unwrap() -= 1;
        self.0.freed.notify_one();
    }
}

pub struct RemoteScorer {
    endpoint: String,
    credential: String,
    agent: ureq::Agent,
    in_flight: InFlight,
}

impl RemoteScorer {
    pub fn new(endpoint: impl Into<String>, credential: impl Into<String>, timeout: Duration, max_in_flight: usize) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            endpoint: endpoint.into(),
            credential: credential.into(),
            agent,
            in_flight: InFlight {
                used: Mutex::new(0),
                freed: Condvar::new(),
                cap: max_in_flight.max(1),
            },
        }
    }

    /// Reads the API key from the environment variable named in `config`.
    pub fn from_config(config: &ScorerConfig) -> Result<Self, ToxError> {
        let endpoint = config
            .endpoint
            .clone()
            .ok_or_else(|| ToxError::InvalidConfig("remote scorer needs an endpoint".into()))?;
        let var = config
            .credential_env
            .as_deref()
            .ok_or_else(|| ToxError::InvalidConfig("remote scorer needs credential_env".into()))?;
        let credential = std::env::var(var)
            .map_err(|_| ToxError::InvalidConfig(format!("environment variable {var} is not set")))?;
        Ok(Self::new(
            endpoint,
            credential,
            Duration::from_secs(config.timeout_secs),
            config.max_in_flight,
        ))
    }

    pub fn score_remote(&self, text: &str) -> Result<CategoryScores, ToxError> {
        let _permit = self.in_flight.acquire();
        let body = serde_json::to_vec(&remote_request_body(text)).expect("request body serializes");
        // Errors are described without the URL: it carries the API key.
        let mut resp = self
            .agent
            .post(&self.endpoint)
            .query("key", &self.credential)
            .header("Content-Type", "application/json")
            .send(&body[..])
            .map_err(|e| ToxError::ScorerUnavailable(describe(&e)))?;

        let status = resp.status().as_u16();
        if status >= 500 || status == 429 {
            return Err(ToxError::ScorerUnavailable(format!("remote scorer returned HTTP {status}")));
        }
        if status >= 400 {
            return Err(ToxError::ProtocolError(format!("remote scorer rejected the request with HTTP {status}")));
        }
        let bytes = resp
            .body_mut()
            .read_to_vec()
            .map_err(|e| ToxError::ScorerUnavailable(describe(&e)))?;
        parse_remote_response(&bytes)
    }
}

fn describe(e: &ureq::Error) -> String {
    match e {
        ureq::Error::Timeout(_) => "request timed out".into(),
        ureq::Error::Io(io) => format!("connection failed: {}", io.kind()),
        ureq::Error::HostNotFound => "host not found".into(),
        ureq::Error::StatusCode(code) => format!("HTTP {code}"),
        _ => "transport error".into(),
    }
}

impl Scorer for RemoteScorer {
    fn id(&self) -> &str {
        "remote"
    }

    fn score(&self, text: &str) -> Result<ScoredText, ToxError> {
        Ok(ScoredText {
            scores: self.score_remote(text)?,
            spans: Vec::new(),
        })
    }
}
