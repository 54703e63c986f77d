//! Policy backend abstraction: request/response types, a retrying gateway
//! over a pluggable transport, an OpenAI-compatible HTTP transport and a
//! scripted transport for hermetic runs.

mod logprobs;
mod mock;
mod openai;

pub use logprobs::{answer_logprobs, AnswerLogprobs};
pub use mock::{FailKind, LabelLogprobs, Script, ScriptStep, ScriptedPolicy};
pub use openai::{EndpointConfig, OpenAiTransport, ENV_API_KEY, ENV_ENDPOINT, ENV_MODEL};

use std::io::Write;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::priors::{PriorError, PriorSource};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub text: String,
}

impl ChatMessage {
    pub fn user(text: impl Into<String>) -> Self {
        ChatMessage { role: Role::User, text: text.into() }
    }

    pub fn system(text: impl Into<String>) -> Self {
        ChatMessage { role: Role::System, text: text.into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyRequest {
    /// Routing key for the scripted backend and the request log. Never sent
    /// over the wire.
    #[serde(default)]
    pub session: String,
    pub messages: Vec<ChatMessage>,
    /// Base64-encoded PNGs, attached in order to the last user turn.
    #[serde(default)]
    pub images: Vec<String>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub want_logprobs: bool,
}

impl PolicyRequest {
    pub fn new(session: impl Into<String>, prompt: impl Into<String>) -> Self {
        PolicyRequest {
            session: session.into(),
            messages: vec![ChatMessage::user(prompt)],
            images: Vec::new(),
            temperature: 0.0,
            max_tokens: 1024,
            want_logprobs: false,
        }
    }

    pub fn with_images(mut self, images: Vec<String>) -> Self {
        self.images = images;
        self
    }

    pub fn with_logprobs(mut self, on: bool) -> Self {
        self.want_logprobs = on;
        self
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if !self.messages.iter().any(|m| m.role == Role::User) {
            return Err(GatewayError::InvalidRequest("no user turn".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(GatewayError::InvalidRequest(format!("temperature {}", self.temperature)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopLogprob {
    pub token: String,
    pub logprob: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
    #[serde(default)]
    pub top: Vec<TopLogprob>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyResponse {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<TokenLogprob>>,
}

impl PolicyResponse {
    pub fn text(text: impl Into<String>) -> Self {
        PolicyResponse { text: text.into(), token_logprobs: None }
    }
}

/// Failure of a single round trip.
#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum TransportError {
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("request timed out: {0}")]
    Timeout(String),
    #[error("transient transport error: {0}")]
    Transient(String),
    #[error("malformed payload: {0}")]
    Malformed(String),
}

impl TransportError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, TransportError::Timeout(_) | TransportError::Transient(_))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum GatewayError {
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("gave up after {attempts} attempts: {last}")]
    Timeout { attempts: u32, last: String },
    #[error("malformed payload: {0}")]
    Malformed(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

/// One round trip, no retries.
pub trait Transport: Send + Sync {
    fn send(&self, req: &PolicyRequest) -> Result<PolicyResponse, TransportError>;
}

/// Anything that answers policy requests.
pub trait Policy: Send + Sync {
    fn complete(&self, req: &PolicyRequest) -> Result<PolicyResponse, GatewayError>;
}

pub trait Sleeper: Send + Sync {
    fn sleep(&self, d: Duration);
}

#[derive(Debug, Default)]
pub struct ThreadSleeper;

impl Sleeper for ThreadSleeper {
    fn sleep(&self, d: Duration) {
        std::thread::sleep(d);
    }
}

/// Records requested delays without waiting.
#[derive(Debug, Default)]
pub struct RecordingSleeper {
    delays: Mutex<Vec<Duration>>,
}

impl RecordingSleeper {
    pub fn delays(&self) -> Vec<Duration> {
        self.delays.lock().unwrap().clone()
    }
}

impl Sleeper for RecordingSleeper {
    fn sleep(&self, d: Duration) {
        self.delays.lock().unwrap().push(d);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub factor: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            base_delay_ms: 1000,
            factor: 2.0,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (1-based).
    pub fn delay(&self, retry: u32) -> Duration {
        let ms = self.base_delay_ms as f64 * self.factor.max(1.0).powi(retry as i32 - 1);
        Duration::from_millis(ms.min(u64::MAX as f64) as u64)
    }
}

/// Counting semaphore bounding in-flight requests.
#[derive(Debug)]
struct Limiter {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Limiter);

impl Limiter {
    fn new(n: usize) -> Self {
        Limiter { free: Mutex::new(n.max(1)), cv: Condvar::new() }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            free = self.cv.wait(free).unwrap();
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Serialize)]
struct LogLine<'a> {
    session: &'a str,
    attempt: u32,
    messages: &'a [ChatMessage],
    images: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    response: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

/// Retrying, concurrency-bounded front end over a [`Transport`].
pub struct Gateway {
    transport: Box<dyn Transport>,
    retry: RetryPolicy,
    sleeper: Arc<dyn Sleeper>,
    limiter: Limiter,
    retries: AtomicU64,
    log: Option<Mutex<Box<dyn Write + Send>>>,
    secrets: Vec<String>,
}

impl Gateway {
    pub fn new(transport: impl Transport + 'static) -> Self {
        Gateway {
            transport: Box::new(transport),
            retry: RetryPolicy::default(),
            sleeper: Arc::new(ThreadSleeper),
            limiter: Limiter::new(8),
            retries: AtomicU64::new(0),
            log: None,
            secrets: Vec::new(),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_sleeper(mut self, sleeper: Arc<dyn Sleeper>) -> Self {
        self.sleeper = sleeper;
        self
    }

    pub fn with_concurrency(mut self, n: usize) -> Self {
        self.limiter = Limiter::new(n);
        self
    }

    /// Appends one JSON line per attempt. Image payloads are summarized and
    /// each string in `secrets` is replaced by `[REDACTED]`.
    pub fn with_log(mut self, sink: Box<dyn Write + Send>, secrets: Vec<String>) -> Self {
        self.log = Some(Mutex::new(sink));
        self.secrets = secrets.into_iter().filter(|s| !s.is_empty()).collect();
        self
    }

    /// Total retries performed so far.
    pub fn retries(&self) -> u64 {
        self.retries.load(Ordering::SeqCst)
    }

    fn log_attempt(&self, req: &PolicyRequest, attempt: u32, out: &Result<PolicyResponse, TransportError>) {
        let Some(log) = &self.log else { return };
        let line = LogLine {
            session: &req.session,
            attempt,
            messages: &req.messages,
            images: req.images.iter().map(|i| format!("<png base64, {} chars>", i.len())).collect(),
            response: out.as_ref().ok().map(|r| r.text.as_str()),
            error: out.as_ref().err().map(|e| e.to_string()),
        };
        let Ok(mut text) = serde_json::to_string(&line) else { return };
        for s in &self.secrets {
            text = text.replace(s.as_str(), "[REDACTED]");
        }
        let mut sink = log.lock().unwrap();
        if let Err(e) = writeln!(sink, "{text}") {
            log::warn!("request log write failed: {e}");
        }
    }
}

impl Policy for Gateway {
    fn complete(&self, req: &PolicyRequest) -> Result<PolicyResponse, GatewayError> {
        req.validate()?;
        let _permit = self.limiter.acquire();
        let max = self.retry.max_attempts.max(1);
        let mut attempt = 1;
        loop {
            let out = self.transport.send(req);
            self.log_attempt(req, attempt, &out);
            match out {
                Ok(resp) => return Ok(resp),
                Err(TransportError::Auth(m)) => return Err(GatewayError::Auth(m)),
                Err(TransportError::Malformed(m)) => return Err(GatewayError::Malformed(m)),
                Err(e) => {
                    if attempt >= max {
                        return Err(GatewayError::Timeout { attempts: attempt, last: e.to_string() });
                    }
                    log::debug!("attempt {attempt} for {:?} failed: {e}", req.session);
                    self.retries.fetch_add(1, Ordering::SeqCst);
                    self.sleeper.sleep(self.retry.delay(attempt));
                    attempt += 1;
                }
            }
        }
    }
}

impl<P: Policy + ?Sized> Policy for Arc<P> {
    fn complete(&self, req: &PolicyRequest) -> Result<PolicyResponse, GatewayError> {
        (**self).complete(req)
    }
}

/// Prior lookup answered by a policy backend.
pub struct RemotePriors<P> {
    policy: P,
}

impl<P: Policy> RemotePriors<P> {
    pub fn new(policy: P) -> Self {
        RemotePriors { policy }
    }
}

impl<P: Policy> PriorSource for RemotePriors<P> {
    fn get_prior(&self, category: &str, view: &str) -> Result<Option<String>, PriorError> {
        let prompt = format!(
            "Describe the expected appearance of a defect-free {category} seen from view {view}. \
             Reply with the description only, or NONE if unknown."
        );
        let resp = self
            .policy
            .complete(&PolicyRequest::new(format!("prior/{category}/{view}"), prompt))
            .map_err(|e| PriorError::Remote(e.to_string()))?;
        let text = resp.text.trim();
        Ok((!text.is_empty() && !text.eq_ignore_ascii_case("none")).then(|| text.to_string()))
    }
}
