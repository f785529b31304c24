//! The single point of contact with chat-completion models.
//!
//! A [`Gateway`] runs in one of three modes:
//!
//! * `live` forwards every request to a [`Transport`];
//! * `record` does the same and keeps a transcript entry per call;
//! * `replay` answers from a loaded transcript and never touches a
//!   transport, failing hard with the request digest on a miss.
//!
//! All modes accumulate token usage in a shared ledger.

mod http;
mod scripted;
mod transcript;

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use http::ChatCompletionsTransport;
pub use scripted::{ScriptRule, ScriptedModel};
pub use transcript::{load_transcript, read_entries, write_transcript, ReplayStore, TranscriptEntry};

pub const DEFAULT_MODEL_ID: &str = "gpt-4o";
pub const DEFAULT_MAX_OUTPUT_TOKENS: u32 = 4096;
pub const API_KEY_ENV: &str = "EMBEDPILOT_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Message {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Message {
            role: Role::User,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRequest {
    pub model_id: String,
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_output_tokens: u32,
}

impl ModelRequest {
    pub fn new(model_id: impl Into<String>, messages: Vec<Message>) -> Self {
        ModelRequest {
            model_id: model_id.into(),
            messages,
            temperature: 0.0,
            max_output_tokens: DEFAULT_MAX_OUTPUT_TOKENS,
        }
    }

    /// SHA-256 over the canonical JSON serialization of the request.
    pub fn digest(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("requests always serialize");
        hex::encode(Sha256::digest(&canonical))
    }

    /// All message text joined, for scanning outbound content.
    pub fn joined_text(&self) -> String {
        self.messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }

    fn validate(&self) -> Result<()> {
        if self.messages.is_empty() {
            return Err(Error::Validation("model request needs at least one message".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(Error::Validation("temperature must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub input_tokens: u64,
    pub output_tokens: u64,
}

impl TokenUsage {
    pub fn new(input_tokens: u64, output_tokens: u64) -> Self {
        TokenUsage {
            input_tokens,
            output_tokens,
        }
    }

    pub fn total(&self) -> u64 {
        self.input_tokens + self.output_tokens
    }

    pub fn saturating_sub(self, other: TokenUsage) -> TokenUsage {
        TokenUsage {
            input_tokens: self.input_tokens.saturating_sub(other.input_tokens),
            output_tokens: self.output_tokens.saturating_sub(other.output_tokens),
        }
    }
}

impl std::ops::Add for TokenUsage {
    type Output = TokenUsage;

    fn add(self, rhs: TokenUsage) -> TokenUsage {
        TokenUsage {
            input_tokens: self.input_tokens + rhs.input_tokens,
            output_tokens: self.output_tokens + rhs.output_tokens,
        }
    }
}

impl std::ops::AddAssign for TokenUsage {
    fn add_assign(&mut self, rhs: TokenUsage) {
        *self = *self + rhs;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelResponse {
    pub text: String,
    pub usage: TokenUsage,
    pub latency_ms: u64,
}

/// Anything that can turn a request into a response over the wire.
///
/// Implementations return [`Error::Transport`] for failures worth retrying
/// and any other error for permanent rejections.
pub trait Transport: Send + Sync {
    fn send(&self, request: &ModelRequest) -> Result<ModelResponse>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GatewayMode {
    Live,
    Record,
    Replay,
}

impl fmt::Display for GatewayMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GatewayMode::Live => "live",
            GatewayMode::Record => "record",
            GatewayMode::Replay => "replay",
        })
    }
}

impl std::str::FromStr for GatewayMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "live" => Ok(GatewayMode::Live),
            "record" => Ok(GatewayMode::Record),
            "replay" => Ok(GatewayMode::Replay),
            other => Err(Error::schema("gateway.mode", format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            base_delay: Duration::from_millis(500),
        }
    }
}

#[derive(Debug, Default)]
pub struct UsageLedger {
    input_tokens: AtomicU64,
    output_tokens: AtomicU64,
    calls: AtomicU64,
    latency_ms: AtomicU64,
}

impl UsageLedger {
    fn add(&self, response: &ModelResponse) {
        self.input_tokens
            .fetch_add(response.usage.input_tokens, Ordering::Relaxed);
        self.output_tokens
            .fetch_add(response.usage.output_tokens, Ordering::Relaxed);
        self.latency_ms
            .fetch_add(response.latency_ms, Ordering::Relaxed);
        self.calls.fetch_add(1, Ordering::Relaxed);
    }

    pub fn total(&self) -> TokenUsage {
        TokenUsage {
            input_tokens: self.input_tokens.load(Ordering::Relaxed),
            output_tokens: self.output_tokens.load(Ordering::Relaxed),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn latency_ms(&self) -> u64 {
        self.latency_ms.load(Ordering::Relaxed)
    }
}

pub type RequestObserver = Arc<dyn Fn(&ModelRequest) + Send + Sync>;

pub struct Gateway {
    mode: GatewayMode,
    model_id: String,
    max_output_tokens: u32,
    transport: Option<Arc<dyn Transport>>,
    replay: Option<ReplayStore>,
    recorded: Mutex<Vec<TranscriptEntry>>,
    ledger: UsageLedger,
    network_calls: AtomicU64,
    retry: RetryPolicy,
    observers: Vec<RequestObserver>,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway")
            .field("mode", &self.mode)
            .field("model_id", &self.model_id)
            .field("calls", &self.ledger.calls())
            .finish_non_exhaustive()
    }
}

impl Gateway {
    pub fn live(transport: Arc<dyn Transport>) -> Self {
        Self::with_parts(GatewayMode::Live, Some(transport), None)
    }

    pub fn record(transport: Arc<dyn Transport>) -> Self {
        Self::with_parts(GatewayMode::Record, Some(transport), None)
    }

    pub fn replay(store: ReplayStore) -> Self {
        Self::with_parts(GatewayMode::Replay, None, Some(store))
    }

    fn with_parts(mode: GatewayMode, transport: Option<Arc<dyn Transport>>, replay: Option<ReplayStore>) -> Self {
        Gateway {
            mode,
            model_id: DEFAULT_MODEL_ID.to_string(),
            max_output_tokens: DEFAULT_MAX_OUTPUT_TOKENS,
            transport,
            replay,
            recorded: Mutex::new(Vec::new()),
            ledger: UsageLedger::default(),
            network_calls: AtomicU64::new(0),
            retry: RetryPolicy::default(),
            observers: Vec::new(),
        }
    }

    pub fn with_model_id(mut self, model_id: impl Into<String>) -> Self {
        self.model_id = model_id.into();
        self
    }

    pub fn with_max_output_tokens(mut self, max: u32) -> Self {
        self.max_output_tokens = max;
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    /// Registers a hook that sees every outbound request before dispatch.
    pub fn with_observer(mut self, observer: RequestObserver) -> Self {
        self.observers.push(observer);
        self
    }

    /// Attaches an unused transport to a replay gateway; only useful for
    /// proving that replay never calls it.
    pub fn with_transport(mut self, transport: Arc<dyn Transport>) -> Self {
        self.transport = Some(transport);
        self
    }

    pub fn mode(&self) -> GatewayMode {
        self.mode
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn ledger(&self) -> &UsageLedger {
        &self.ledger
    }

    /// Number of times a transport was actually invoked (retries included).
    pub fn network_calls(&self) -> u64 {
        self.network_calls.load(Ordering::Relaxed)
    }

    pub fn transcript(&self) -> Vec<TranscriptEntry> {
        self.recorded.lock().expect("transcript lock").clone()
    }

    /// Builds a temperature-0 request with the gateway's defaults.
    pub fn request(&self, messages: Vec<Message>) -> ModelRequest {
        ModelRequest {
            model_id: self.model_id.clone(),
            messages,
            temperature: 0.0,
            max_output_tokens: self.max_output_tokens,
        }
    }

    /// Convenience for a system + user exchange.
    pub fn ask(&self, system: &str, user: &str) -> Result<ModelResponse> {
        self.complete(&self.request(vec![Message::system(system), Message::user(user)]))
    }

    pub fn complete(&self, request: &ModelRequest) -> Result<ModelResponse> {
        request.validate()?;
        for observer in &self.observers {
            observer(request);
        }
        let response = match self.mode {
            GatewayMode::Replay => {
                let digest = request.digest();
                self.replay
                    .as_ref()
                    .and_then(|s| s.get(&digest))
                    .cloned()
                    .ok_or(Error::ReplayMiss { digest })?
            }
            GatewayMode::Live | GatewayMode::Record => {
                let response = self.send_with_retry(request)?;
                if self.mode == GatewayMode::Record {
                    self.recorded
                        .lock()
                        .expect("transcript lock")
                        .push(TranscriptEntry {
                            digest: request.digest(),
                            request: request.clone(),
                            response: response.clone(),
                        });
                }
                response
            }
        };
        self.ledger.add(&response);
        Ok(response)
    }

    fn send_with_retry(&self, request: &ModelRequest) -> Result<ModelResponse> {
        let transport = self
            .transport
            .as_ref()
            .ok_or_else(|| Error::Endpoint("no transport configured".into()))?;
        let attempts = self.retry.attempts.max(1);
        let mut last = None;
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(self.retry.base_delay * 2u32.pow(attempt - 1));
            }
            self.network_calls.fetch_add(1, Ordering::Relaxed);
            let started = Instant::now();
            match transport.send(request) {
                Ok(mut response) => {
                    if response.latency_ms == 0 {
                        response.latency_ms = started.elapsed().as_millis() as u64;
                    }
                    return Ok(response);
                }
                Err(Error::Transport(msg)) => {
                    tracing::warn!(attempt = attempt + 1, error = %msg, "model transport failed");
                    last = Some(msg);
                }
                Err(other) => return Err(other),
            }
        }
        Err(Error::Transport(format!(
            "giving up after {attempts} attempts: {}",
            last.unwrap_or_default()
        )))
    }
}
