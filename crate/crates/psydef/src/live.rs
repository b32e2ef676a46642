//! HTTP gateways for the four backend traits.
//!
//! Every request is a JSON `POST` to the configured endpoint with an
//! optional `Authorization: Bearer <key>` header; the key comes from
//! `PSYDEF_API_KEY` unless the config names another variable.
//!
//! | gateway   | request body                                              | response body                                   |
//! |-----------|-----------------------------------------------------------|-------------------------------------------------|
//! | generator | `{model, messages:[{role:"user",content}], max_tokens, temperature, seed?}` | `{choices:[{message:{content}}]}` |
//! | nli       | `{model, premise, hypotheses:[..]}`                       | `{entailment:[p, ..]}` aligned with hypotheses  |
//! | emotion   | `{model, text}`                                           | `{label, confidence}`                           |
//! | encoder   | `{model, input}`                                          | `{data:[{embedding:[768 floats]}]}`             |

use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use psydef_core::backends::{
    BackendError, EmotionResult, EmotionScorer, GenerationParams, Generator, NliScorer, TextEncoder, EMBEDDING_DIM,
};
use serde_json::{json, Value};

pub const API_KEY_ENV: &str = "PSYDEF_API_KEY";

/// Sends one JSON request and returns the decoded JSON reply.
pub trait Transport: Send + Sync {
    fn post_json(&self, url: &str, body: &Value, api_key: Option<&str>) -> Result<Value, BackendError>;
}

pub struct UreqTransport {
    agent: ureq::Agent,
}

impl UreqTransport {
    pub fn new(timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        UreqTransport { agent }
    }
}

impl Transport for UreqTransport {
    fn post_json(&self, url: &str, body: &Value, api_key: Option<&str>) -> Result<Value, BackendError> {
        let mut req = self.agent.post(url).header("Content-Type", "application/json");
        if let Some(key) = api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req.send_json(body).map_err(classify)?;
        resp.body_mut()
            .read_json::<Value>()
            .map_err(|e| BackendError::Malformed(format!("response is not JSON: {e}")))
    }
}

fn classify(e: ureq::Error) -> BackendError {
    match e {
        // rate limiting and server faults are transient; other statuses are not
        ureq::Error::StatusCode(code) if code == 429 || code >= 500 => {
            BackendError::Transport(format!("http status {code}"))
        }
        ureq::Error::StatusCode(code) => BackendError::InvalidRequest(format!("http status {code}")),
        other => BackendError::Transport(other.to_string()),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub initial_backoff: Duration,
    pub multiplier: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            initial_backoff: Duration::from_secs(1),
            multiplier: 2.0,
        }
    }
}

pub type Sleeper = Arc<dyn Fn(Duration) + Send + Sync>;

pub fn thread_sleeper() -> Sleeper {
    Arc::new(std::thread::sleep)
}

/// Counting semaphore bounding concurrent requests per gateway.
pub struct InFlightLimiter {
    max: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

pub struct Permit<'a>(&'a InFlightLimiter);

impl InFlightLimiter {
    pub fn new(max: usize) -> Self {
        InFlightLimiter {
            max: max.max(1),
            active: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut n = self.active.lock().unwrap_or_else(|p| p.into_inner());
        while *n >= self.max {
            n = self.freed.wait(n).unwrap_or_else(|p| p.into_inner());
        }
        *n += 1;
        Permit(self)
    }

    pub fn in_flight(&self) -> usize {
        *self.active.lock().unwrap_or_else(|p| p.into_inner())
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.0.active.lock().unwrap_or_else(|p| p.into_inner());
        *n -= 1;
        self.0.freed.notify_one();
    }
}

/// Shared plumbing: endpoint, credentials, retries and the in-flight bound.
#[derive(Clone)]
pub struct HttpClient {
    pub endpoint: String,
    pub model: String,
    api_key: Option<String>,
    transport: Arc<dyn Transport>,
    retry: RetryPolicy,
    sleeper: Sleeper,
    limiter: Arc<InFlightLimiter>,
}

impl HttpClient {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>, transport: Arc<dyn Transport>) -> Self {
        HttpClient {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
            transport,
            retry: RetryPolicy::default(),
            sleeper: thread_sleeper(),
            limiter: Arc::new(InFlightLimiter::new(4)),
        }
    }

    pub fn with_api_key(mut self, key: Option<String>) -> Self {
        self.api_key = key;
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_sleeper(mut self, sleeper: Sleeper) -> Self {
        self.sleeper = sleeper;
        self
    }

    pub fn with_limiter(mut self, limiter: Arc<InFlightLimiter>) -> Self {
        self.limiter = limiter;
        self
    }

    /// Post `body`, decode with `parse`, retrying transient failures with
    /// exponential backoff up to the policy's attempt bound.
    pub fn call<T>(&self, body: &Value, parse: impl Fn(&Value) -> Result<T, BackendError>) -> Result<T, BackendError> {
        let attempts = self.retry.attempts.max(1);
        let mut backoff = self.retry.initial_backoff;
        let mut last = None;
        for attempt in 1..=attempts {
            let result = {
                let _permit = self.limiter.acquire();
                self.transport
                    .post_json(&self.endpoint, body, self.api_key.as_deref())
                    .and_then(|v| parse(&v))
            };
            match result {
                Ok(v) => {
                    log::debug!("{}: succeeded after {attempt} attempt(s)", self.endpoint);
                    return Ok(v);
                }
                Err(e) if e.is_retryable() => {
                    log::warn!("{}: attempt {attempt}/{attempts} failed: {e}", self.endpoint);
                    last = Some(e);
                    if attempt < attempts {
                        (self.sleeper)(backoff);
                        backoff = backoff.mul_f64(self.retry.multiplier);
                    }
                }
                Err(e) => return Err(e),
            }
        }
        log::error!("{}: giving up after {attempts} attempt(s)", self.endpoint);
        Err(BackendError::Exhausted {
            attempts,
            last: last.map(|e| e.to_string()).unwrap_or_default(),
        })
    }
}

fn malformed(what: &str) -> BackendError {
    BackendError::Malformed(format!("missing or invalid `{what}` in response"))
}

pub struct LiveGenerator(pub HttpClient);

impl Generator for LiveGenerator {
    fn complete(&self, prompt: &str, params: &GenerationParams) -> Result<String, BackendError> {
        if prompt.trim().is_empty() {
            return Err(BackendError::InvalidRequest("prompt is empty".into()));
        }
        params.validate()?;
        let mut body = json!({
            "model": self.0.model,
            "messages": [{"role": "user", "content": prompt}],
            "max_tokens": params.max_tokens,
            "temperature": params.temperature,
        });
        if let Some(seed) = params.seed {
            body["seed"] = json!(seed);
        }
        self.0.call(&body, |v| {
            let text = v
                .pointer("/choices/0/message/content")
                .and_then(Value::as_str)
                .ok_or_else(|| malformed("choices[0].message.content"))?;
            if text.trim().is_empty() {
                Err(BackendError::EmptyReply)
            } else {
                Ok(text.to_string())
            }
        })
    }
}

pub struct LiveNli(pub HttpClient);

impl NliScorer for LiveNli {
    fn entail(&self, premise: &str, hypothesis: &str) -> Result<f64, BackendError> {
        Ok(self.entail_batch(premise, &[hypothesis])?[0])
    }

    fn entail_batch(&self, premise: &str, hypotheses: &[&str]) -> Result<Vec<f64>, BackendError> {
        if premise.trim().is_empty() || hypotheses.iter().any(|h| h.trim().is_empty()) {
            return Err(BackendError::InvalidRequest("premise and hypotheses must be non-empty".into()));
        }
        let body = json!({"model": self.0.model, "premise": premise, "hypotheses": hypotheses});
        self.0.call(&body, |v| {
            let arr = v.get("entailment").and_then(Value::as_array).ok_or_else(|| malformed("entailment"))?;
            if arr.len() != hypotheses.len() {
                return Err(BackendError::Malformed(format!(
                    "expected {} entailment scores, got {}",
                    hypotheses.len(),
                    arr.len()
                )));
            }
            arr.iter()
                .map(|x| {
                    x.as_f64()
                        .filter(|p| (0.0..=1.0).contains(p))
                        .ok_or_else(|| malformed("entailment[i] in [0, 1]"))
                })
                .collect()
        })
    }
}

pub struct LiveEmotion(pub HttpClient);

impl EmotionScorer for LiveEmotion {
    fn score(&self, text: &str) -> Result<EmotionResult, BackendError> {
        if text.trim().is_empty() {
            return Err(BackendError::InvalidRequest("text is empty".into()));
        }
        let body = json!({"model": self.0.model, "text": text});
        self.0.call(&body, |v| {
            let label = v.get("label").and_then(Value::as_str).ok_or_else(|| malformed("label"))?;
            let conf = v
                .get("confidence")
                .and_then(Value::as_f64)
                .filter(|c| (0.0..=1.0).contains(c))
                .ok_or_else(|| malformed("confidence"))?;
            Ok(EmotionResult::new(label, conf))
        })
    }
}

/// Remote encoder; frozen from the trainer's point of view.
pub struct LiveEncoder(pub HttpClient);

impl TextEncoder for LiveEncoder {
    fn encode(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        if text.trim().is_empty() {
            return Err(BackendError::InvalidRequest("text is empty".into()));
        }
        let body = json!({"model": self.0.model, "input": text});
        self.0.call(&body, |v| {
            let arr = v
                .pointer("/data/0/embedding")
                .and_then(Value::as_array)
                .ok_or_else(|| malformed("data[0].embedding"))?;
            if arr.len() != EMBEDDING_DIM {
                return Err(BackendError::Malformed(format!(
                    "embedding has {} components, expected {EMBEDDING_DIM}",
                    arr.len()
                )));
            }
            arr.iter().map(|x| x.as_f64().ok_or_else(|| malformed("embedding[i]"))).collect()
        })
    }

    fn kind(&self) -> &str {
        "live"
    }
}
